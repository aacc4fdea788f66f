//! Single-file tensor container.
//!
//! Layout: magic `PNLF`, `u32` little-endian header length, UTF-8 JSON
//! header, then the concatenated little-endian `f32` tensor data. Header
//! offsets are relative to the start of that data blob.

use std::fs;
use std::path::Path;

use panelf_core::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelParams;

pub const MAGIC: &[u8; 4] = b"PNLF";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    adapter_only: bool,
    step: u64,
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything in a checkpoint besides the tensor data.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct CheckpointInfo {
    pub adapter_only: bool,
    pub step: u64,
    pub config: serde_json::Value,
}

/// In-memory checkpoint: named tensors plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub tensors: ModelParams,
    pub info: CheckpointInfo,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode(&self.tensors, &self.info)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (tensors, info) = decode(bytes)?;
        Ok(Checkpoint { tensors, info })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.tensors, &self.info, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, info) = load_checkpoint(path)?;
        Ok(Checkpoint { tensors, info })
    }
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn encode(tensors: &ModelParams, info: &CheckpointInfo) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(tensors.num_elements() * 4);
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors.iter() {
        let start = blob.len();
        for v in t.data().iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: start as u64,
            nbytes: (blob.len() - start) as u64,
            sha256: digest(&blob[start..]),
        });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        adapter_only: info.adapter_only,
        step: info.step,
        config: info.config.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Config("checkpoint header too large".into()))?;
    let mut out = Vec::with_capacity(8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CheckpointInfo)> {
    if bytes.len() < 8 {
        return Err(Error::Integrity {
            offset: bytes.len() as u64,
            detail: "file shorter than the fixed preamble".into(),
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Integrity {
            offset: 0,
            detail: "bad magic bytes".into(),
        });
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let data_start = 8 + hlen;
    if data_start > bytes.len() {
        return Err(Error::Integrity {
            offset: 8,
            detail: format!("header length {hlen} exceeds file size {}", bytes.len()),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[8..data_start]).map_err(|e| Error::Integrity {
        offset: 8,
        detail: format!("unreadable header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let blob = &bytes[data_start..];
    let abs = |off: u64| data_start as u64 + off;

    let mut entries = header.tensors.clone();
    entries.sort_by_key(|e| e.offset);
    let mut expected = 0u64;
    let mut params = ModelParams::new();
    for e in &entries {
        if e.offset != expected {
            return Err(Error::Integrity {
                offset: abs(expected.min(e.offset)),
                detail: format!("tensor `{}` does not start where the previous one ended", e.name),
            });
        }
        let numel: usize = e.shape.iter().product();
        if e.nbytes != numel as u64 * 4 {
            return Err(Error::Integrity {
                offset: abs(e.offset),
                detail: format!("tensor `{}` byte length disagrees with its shape", e.name),
            });
        }
        let end = e.offset + e.nbytes;
        if end > blob.len() as u64 {
            return Err(Error::Integrity {
                offset: abs(e.offset),
                detail: format!("tensor `{}` runs past the end of the file", e.name),
            });
        }
        let raw = &blob[e.offset as usize..end as usize];
        if digest(raw) != e.sha256 {
            return Err(Error::Integrity {
                offset: abs(e.offset),
                detail: format!("checksum mismatch in tensor `{}`", e.name),
            });
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)?;
        expected = end;
    }
    if expected != blob.len() as u64 {
        return Err(Error::Integrity {
            offset: abs(expected),
            detail: "trailing bytes after the last tensor".into(),
        });
    }
    let info = CheckpointInfo {
        adapter_only: header.adapter_only,
        step: header.step,
        config: header.config,
    };
    Ok((params, info))
}

/// Writes atomically via a sibling temporary file.
pub fn save_checkpoint(tensors: &ModelParams, info: &CheckpointInfo, path: &Path) -> Result<()> {
    let bytes = encode(tensors, info)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointInfo)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use panelf_core::Rng;
    use proptest::prelude::*;

    fn sample_params(seed: u64) -> ModelParams {
        let mut rng = Rng::new(seed);
        let mut p = ModelParams::new();
        p.insert("a.weight", rng.normal_tensor(&[3, 4]).unwrap()).unwrap();
        p.insert("b", rng.normal_tensor(&[5]).unwrap()).unwrap();
        p.insert("c.bias", Tensor::new(vec![1], vec![-0.0]).unwrap()).unwrap();
        p
    }

    #[test]
    fn layout_starts_with_magic_and_length() {
        let bytes = encode(&sample_params(0), &CheckpointInfo::default()).unwrap();
        assert_eq!(&bytes[..4], b"PNLF");
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        assert_eq!(header["format_version"], 1);
        assert_eq!(bytes.len(), 8 + hlen + (12 + 5 + 1) * 4);
    }

    #[test]
    fn truncated_file_names_offset() {
        let bytes = encode(&sample_params(1), &CheckpointInfo::default()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        match decode(cut).unwrap_err() {
            Error::Integrity { offset, .. } => assert!(offset as usize <= cut.len()),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn flipped_byte_detected_at_its_tensor() {
        let params = sample_params(2);
        let mut bytes = encode(&params, &CheckpointInfo::default()).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let data_start = 8 + hlen;
        // Second tensor in path order is `b`, starting after the 12 floats of `a.weight`.
        let target = data_start + 12 * 4 + 2;
        bytes[target] ^= 0x40;
        match decode(&bytes).unwrap_err() {
            Error::Integrity { offset, .. } => assert_eq!(offset as usize, data_start + 48),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn version_checked() {
        let bytes = encode(&sample_params(3), &CheckpointInfo::default()).unwrap();
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let mut header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + hlen]).unwrap();
        header["format_version"] = 99.into();
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = b"PNLF".to_vec();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&bytes[8 + hlen..]);
        assert!(matches!(decode(&out), Err(Error::Version { found: 99, .. })));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&sample_params(4), &CheckpointInfo::default()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Integrity { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(seed in 0u64..500, step in 0u64..100_000, adapter_only: bool) {
            let params = sample_params(seed);
            let info = CheckpointInfo { adapter_only, step, config: serde_json::json!({"seed": seed}) };
            let (back, info2) = decode(&encode(&params, &info).unwrap()).unwrap();
            prop_assert!(back.bit_equal(&params));
            prop_assert_eq!(info2, info);
        }
    }
}
