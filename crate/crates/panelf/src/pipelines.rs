//! Generation pipelines: text-to-image, image-to-image, edge-map starts, and per-frame video.

use std::path::{Path, PathBuf};

use panelf_core::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{edge_map, image_to_tensor, list_pngs, tensor_to_image, PageImage, DEFAULT_EDGE_HIGH, DEFAULT_EDGE_LOW};
use crate::diffusion::{denoise_from, noise_to_step, sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::train::ModelBundle;

pub const DEFAULT_STRENGTH: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Txt2Img,
    Img2Img,
    Edge2Img,
    Video,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Txt2Img => "txt2img",
            Mode::Img2Img => "img2img",
            Mode::Edge2Img => "edge2img",
            Mode::Video => "video",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedMode {
    /// Every frame reuses the request seed.
    Shared,
    /// Frame `i` uses `seed + i`.
    Independent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub mode: Mode,
    pub prompt: String,
    /// Image for img2img/edge2img, frame directory for video.
    pub input_path: Option<PathBuf>,
    pub strength: f64,
    pub seed: u64,
    /// Output directory.
    pub output_path: PathBuf,
    pub count: usize,
    pub edge_low: f64,
    pub edge_high: f64,
    pub seed_mode: SeedMode,
}

impl GenerationRequest {
    pub fn new(mode: Mode, prompt: impl Into<String>, output_path: impl Into<PathBuf>) -> Self {
        GenerationRequest {
            mode,
            prompt: prompt.into(),
            input_path: None,
            strength: DEFAULT_STRENGTH,
            seed: 0,
            output_path: output_path.into(),
            count: 1,
            edge_low: DEFAULT_EDGE_LOW,
            edge_high: DEFAULT_EDGE_HIGH,
            seed_mode: SeedMode::Shared,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.mode, &self.input_path) {
            (Mode::Txt2Img, Some(_)) => return Err(Error::Config("txt2img takes no input".into())),
            (Mode::Txt2Img, None) => {}
            (_, None) => return Err(Error::Config(format!("{} needs an input", self.mode.name()))),
            _ => {}
        }
        if self.mode != Mode::Txt2Img && !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::Config(format!("strength {} outside [0, 1]", self.strength)));
        }
        if self.count == 0 {
            return Err(Error::Config("count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Temporal inconsistency of an input clip and its stylized frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemporalReport {
    /// `None` for clips shorter than two frames.
    pub ti_input: Option<f64>,
    pub ti_output: Option<f64>,
    pub input_diffs: Vec<f64>,
    pub diffs: Vec<f64>,
}

/// Mean absolute difference between consecutive frames, in `[0, 1]` pixel units,
/// and its average over the clip.
pub fn temporal_inconsistency(frames: &[PageImage]) -> Result<(Option<f64>, Vec<f64>)> {
    let mut diffs = Vec::with_capacity(frames.len().saturating_sub(1));
    for pair in frames.windows(2) {
        let (a, b) = (pair[0].to_gray(), pair[1].to_gray());
        if (a.width(), a.height()) != (b.width(), b.height()) {
            return Err(Error::Geometry("frames differ in size".into()));
        }
        let sum: u64 = a.pixels().iter().zip(b.pixels()).map(|(&x, &y)| x.abs_diff(y) as u64).sum();
        diffs.push(sum as f64 / (255.0 * a.pixels().len() as f64));
    }
    let ti = (!diffs.is_empty()).then(|| diffs.iter().sum::<f64>() / diffs.len() as f64);
    Ok((ti, diffs))
}

fn input_size(bundle: &ModelBundle) -> usize {
    let m = &bundle.model;
    m.unet_config.image_size * m.autoencoder.as_ref().map_or(1, |a| a.config.factor())
}

/// Generates one image per seed `seed, seed + 1, …`.
pub fn txt2img(bundle: &ModelBundle, prompt: &str, seed: u64, count: usize) -> Result<Vec<PageImage>> {
    let cond = bundle.encode_prompt(prompt)?;
    let net = bundle.predictor();
    let shape = bundle.model.sample_shape();
    (0..count as u64)
        .map(|i| {
            let cfg = SamplerConfig {
                seed: seed.wrapping_add(i),
                clip_output: !bundle.model.latent_mode(),
            };
            let x = sample(&net, &shape, &cond, bundle.schedule(), &cfg)?;
            tensor_to_image(&bundle.model.to_image_space(&x)?)
        })
        .collect()
}

/// Noises `input` to `round(strength·T)` and denoises back under `prompt`.
pub fn img2img(bundle: &ModelBundle, input: &PageImage, prompt: &str, strength: f64, seed: u64) -> Result<PageImage> {
    let size = input_size(bundle);
    if input.width() != size || input.height() != size {
        return Err(Error::Geometry(format!(
            "input is {}x{}, the model works on {size}x{size}",
            input.width(),
            input.height()
        )));
    }
    let x_in = bundle.model.to_model_space(&image_to_tensor(&input.to_gray())?)?;
    let mut rng = Rng::new(seed);
    let (x_start, t_start) = noise_to_step(&x_in, strength, bundle.schedule(), &mut rng)?;
    log::info!("img2img strength {strength} starts at t = {t_start}");
    let cond = bundle.encode_prompt(prompt)?;
    let x = denoise_from(&bundle.predictor(), &x_start, t_start, &cond, bundle.schedule(), &mut rng, !bundle.model.latent_mode())?;
    tensor_to_image(&bundle.model.to_image_space(&x)?)
}

/// img2img started from the edge map of `input`.
pub fn edge2img(
    bundle: &ModelBundle,
    input: &PageImage,
    prompt: &str,
    strength: f64,
    seed: u64,
    low: f64,
    high: f64,
) -> Result<PageImage> {
    img2img(bundle, &edge_map(input, low, high)?, prompt, strength, seed)
}

/// Stylizes each frame independently with img2img.
pub fn video_frames(
    bundle: &ModelBundle,
    frames: &[PageImage],
    prompt: &str,
    strength: f64,
    seed: u64,
    seed_mode: SeedMode,
) -> Result<(Vec<PageImage>, TemporalReport)> {
    let out = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let s = match seed_mode {
                SeedMode::Shared => seed,
                SeedMode::Independent => seed.wrapping_add(i as u64),
            };
            img2img(bundle, f, prompt, strength, s)
        })
        .collect::<Result<Vec<_>>>()?;
    let (ti_input, input_diffs) = temporal_inconsistency(frames)?;
    let (ti_output, diffs) = temporal_inconsistency(&out)?;
    Ok((
        out,
        TemporalReport {
            ti_input,
            ti_output,
            input_diffs,
            diffs,
        },
    ))
}

fn write_all(images: &[PageImage], names: impl Iterator<Item = String>, dir: &Path) -> Result<Vec<PathBuf>> {
    images
        .iter()
        .zip(names)
        .map(|(img, name)| {
            let path = dir.join(name);
            img.save_png(&path)?;
            Ok(path)
        })
        .collect()
}

/// Runs `req` and writes its PNGs; video runs also return their report.
pub fn run_request(bundle: &ModelBundle, req: &GenerationRequest) -> Result<(Vec<PathBuf>, Option<TemporalReport>)> {
    req.validate()?;
    let dir = &req.output_path;
    let seeded = |prefix: &'static str| (0..req.count as u64).map(move |i| format!("{prefix}-{}.png", req.seed.wrapping_add(i)));
    let input = req.input_path.as_deref().unwrap_or(Path::new(""));
    match req.mode {
        Mode::Txt2Img => {
            let images = txt2img(bundle, &req.prompt, req.seed, req.count)?;
            Ok((write_all(&images, seeded("txt2img"), dir)?, None))
        }
        Mode::Img2Img | Mode::Edge2Img => {
            let img = PageImage::load_png(input)?;
            let images = (0..req.count as u64)
                .map(|i| {
                    let s = req.seed.wrapping_add(i);
                    match req.mode {
                        Mode::Edge2Img => edge2img(bundle, &img, &req.prompt, req.strength, s, req.edge_low, req.edge_high),
                        _ => img2img(bundle, &img, &req.prompt, req.strength, s),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((write_all(&images, seeded(req.mode.name()), dir)?, None))
        }
        Mode::Video => {
            let paths = list_pngs(input)?;
            if paths.is_empty() {
                return Err(Error::Config(format!("no PNG frames in {}", input.display())));
            }
            let frames = paths.iter().map(|p| PageImage::load_png(p)).collect::<Result<Vec<_>>>()?;
            let (out, report) = video_frames(bundle, &frames, &req.prompt, req.strength, req.seed, req.seed_mode)?;
            let names = (0..out.len()).map(|i| format!("frame-{i:05}.png"));
            Ok((write_all(&out, names, dir)?, Some(report)))
        }
    }
}
