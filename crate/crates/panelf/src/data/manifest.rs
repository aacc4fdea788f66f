use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CAPTION: &str = "CNH3000";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub image: String,
    pub caption: String,
}

/// Image/caption pairs, stored as one JSON object per line.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<ManifestRecord>, _>>()?;
        if let Some(r) = records.iter().find(|r| r.caption.trim().is_empty()) {
            return Err(Error::Config(format!("empty caption for `{}`", r.image)));
        }
        Ok(DatasetManifest { records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text)
    }

    /// Image paths resolved against `base` when relative.
    pub fn image_paths(&self, base: &Path) -> Vec<PathBuf> {
        self.records
            .iter()
            .map(|r| {
                let p = Path::new(&r.image);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            })
            .collect()
    }
}

/// PNG files directly inside `dir`, sorted by path.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// One record per PNG in `panel_dir`, in sorted path order, all sharing `caption`.
pub fn build_manifest(panel_dir: &Path, caption: &str) -> Result<DatasetManifest> {
    if caption.trim().is_empty() {
        return Err(Error::Config("caption must be non-empty".into()));
    }
    let records: Vec<ManifestRecord> = list_pngs(panel_dir)?
        .into_iter()
        .map(|p| ManifestRecord {
            image: p.display().to_string(),
            caption: caption.to_string(),
        })
        .collect();
    if records.is_empty() {
        log::warn!("no PNG panels found in {}", panel_dir.display());
    }
    Ok(DatasetManifest { records })
}
