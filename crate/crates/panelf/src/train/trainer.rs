//! Denoising training loops for the base model, adapters, and autoencoder.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use panelf_core::{Adam, Rng, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{image_to_tensor, DatasetManifest, PageImage};
use crate::diffusion::{ddpm_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::{ae_eval_loss, ae_train_step, ModelParams, UNet};
use crate::text::{encode_text, tokenize, KEYWORD};
use crate::train::bundle::{adapter_checkpoint, Autoencoder, DiffusionModel};
use crate::train::checkpoint::Checkpoint;
use crate::train::schedule::{cosine_restart_lr, sample_timestep};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_period: usize,
    pub seed: u64,
    /// Zero disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Zero disables the JSON-lines log.
    pub log_every: usize,
    /// Tokens whose embedding rows train alongside the adapters.
    pub train_tokens: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_steps(5_000)
    }
}

impl TrainConfig {
    /// Defaults with `lr_period = total_steps / 2`.
    pub fn with_steps(total_steps: usize) -> Self {
        TrainConfig {
            total_steps,
            batch_size: 1,
            lr0: 1e-4,
            lr_period: (total_steps / 2).max(1),
            seed: 0,
            checkpoint_every: 0,
            log_every: 100,
            train_tokens: vec![KEYWORD.to_string()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.lr_period == 0 || self.batch_size == 0 {
            return Err(Error::Config("total_steps, lr_period and batch_size must be at least 1".into()));
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Where a run writes its log and periodic checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_path: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub t_sampled: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub timesteps: Vec<usize>,
}

impl TrainReport {
    fn decile(&self, last: bool) -> f64 {
        let n = (self.losses.len() / 10).max(1).min(self.losses.len());
        let slice = if last {
            &self.losses[self.losses.len() - n..]
        } else {
            &self.losses[..n]
        };
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }

    pub fn first_decile_mean(&self) -> f64 {
        self.decile(false)
    }

    pub fn last_decile_mean(&self) -> f64 {
        self.decile(true)
    }
}

/// Training examples already in diffusion space, with tokenized captions.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub x0: Vec<Tensor>,
    pub ids: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    /// Converts gray panels to the model's training space.
    pub fn from_images(model: &DiffusionModel, pairs: &[(PageImage, String)]) -> Result<Self> {
        let size = model.unet_config.image_size * model.autoencoder.as_ref().map_or(1, |a| a.config.factor());
        let mut x0 = Vec::with_capacity(pairs.len());
        let mut ids = Vec::with_capacity(pairs.len());
        for (img, caption) in pairs {
            if img.width() != size || img.height() != size {
                return Err(Error::Geometry(format!(
                    "training images must be {size}x{size}, got {}x{}",
                    img.width(),
                    img.height()
                )));
            }
            x0.push(model.to_model_space(&image_to_tensor(&img.to_gray())?)?);
            ids.push(tokenize(caption, &model.vocab));
        }
        Ok(Dataset { x0, ids })
    }

    /// Loads every record of `manifest`, resolving relative paths against `base`.
    pub fn from_manifest(model: &DiffusionModel, manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Config("manifest has no records".into()));
        }
        let pairs = manifest
            .image_paths(base)
            .iter()
            .zip(&manifest.records)
            .map(|(p, r)| Ok((PageImage::load_png(p)?, r.caption.clone())))
            .collect::<Result<Vec<_>>>()?;
        Self::from_images(model, &pairs)
    }
}

struct Loop<'a> {
    cfg: &'a TrainConfig,
    data: &'a Dataset,
    schedule: &'a NoiseSchedule,
    outputs: &'a TrainOutputs,
}

impl Loop<'_> {
    /// Shared step loop. `loss_at` builds the differentiable loss for one
    /// example; `after_backward` may edit gradients before the update.
    fn run(
        &self,
        trainable: &[(String, Tensor)],
        mut loss_at: impl FnMut(&Tensor, &[usize], usize, &mut Rng) -> Result<Tensor>,
        after_backward: impl Fn(),
        snapshot: impl Fn(u64) -> Result<Checkpoint>,
    ) -> Result<TrainReport> {
        self.cfg.validate()?;
        if self.data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut log = match &self.outputs.log_path {
            Some(p) if self.cfg.log_every > 0 => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                Some(BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?))
            }
            _ => None,
        };
        let mut rng = Rng::new(self.cfg.seed);
        let mut opt = Adam::new();
        let mut report = TrainReport::default();
        let steps = self.schedule.steps();
        for step in 0..self.cfg.total_steps {
            let lr = cosine_restart_lr(step, self.cfg.lr0, self.cfg.lr_period);
            let mut loss_sum = 0.0;
            let mut t_first = 0;
            for b in 0..self.cfg.batch_size {
                let i = rng.below(self.data.len());
                let t = sample_timestep(&mut rng, steps);
                if b == 0 {
                    t_first = t;
                }
                let loss = match loss_at(&self.data.x0[i], &self.data.ids[i], t, &mut rng) {
                    Ok(l) => l.scale(1.0 / self.cfg.batch_size as f64)?,
                    Err(Error::Tensor(panelf_core::TensorError::NonFinite { .. })) => {
                        return Err(self.abort(step, lr));
                    }
                    Err(e) => return Err(e),
                };
                loss_sum += loss.item()? as f64;
                loss.backward()?;
            }
            if !loss_sum.is_finite() {
                return Err(self.abort(step, lr));
            }
            after_backward();
            opt.step(trainable.iter().map(|(n, t)| (n.as_str(), t)), lr)
                .map_err(|_| self.abort(step, lr))?;
            report.losses.push(loss_sum);
            report.timesteps.push(t_first);
            if let Some(w) = log.as_mut() {
                if step % self.cfg.log_every == 0 || step + 1 == self.cfg.total_steps {
                    let rec = LogRecord {
                        step,
                        loss: loss_sum,
                        lr,
                        t_sampled: t_first,
                    };
                    writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(Path::new("log"), e))?;
                }
            }
            if let Some(dir) = &self.outputs.checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && (step + 1) % every == 0 {
                    snapshot((step + 1) as u64)?.save(&dir.join(format!("step-{:06}.pnlf", step + 1)))?;
                }
            }
        }
        if let Some(mut w) = log {
            w.flush().map_err(|e| Error::io(Path::new("log"), e))?;
        }
        Ok(report)
    }

    fn abort(&self, step: usize, lr: f64) -> Error {
        log::error!("non-finite loss at step {step} (lr {lr:e})");
        Error::NonFiniteLoss { step, lr }
    }
}

/// Trains every U-Net and text-encoder weight of `model` in place.
pub fn train_base(model: &DiffusionModel, data: &Dataset, cfg: &TrainConfig, outputs: &TrainOutputs) -> Result<TrainReport> {
    model.unet.set_requires_grad(true);
    model.text.set_requires_grad(true);
    let mut trainable: Vec<(String, Tensor)> =
        model.unet.iter().map(|(k, v)| (format!("unet.{k}"), v.clone())).collect();
    trainable.extend(model.text.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let net = UNet::new(&model.unet_config, &model.unet, None);
    let looper = Loop {
        cfg,
        data,
        schedule: &model.schedule,
        outputs,
    };
    let report = looper.run(
        &trainable,
        |x0, ids, t, rng| {
            let cond = encode_text(ids, &model.text)?;
            ddpm_loss(&net, x0, t, &cond, &model.schedule, rng)
        },
        || {},
        |step| model.to_checkpoint(step),
    );
    model.unet.set_requires_grad(false);
    model.text.set_requires_grad(false);
    report
}

/// Result of adapter training: the adapters train in place inside the
/// `LoraSet`; the fine-tuned text table is a copy of the base table.
#[derive(Debug)]
pub struct LoraRun {
    pub report: TrainReport,
    pub text: ModelParams,
    pub checkpoint: Checkpoint,
}

/// Trains `lora` adapters plus the embedding rows of `cfg.train_tokens`.
///
/// The base U-Net and base text table are never written.
pub fn train_lora(
    model: &DiffusionModel,
    lora: &LoraSet,
    data: &Dataset,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    base_path: Option<&Path>,
) -> Result<LoraRun> {
    let text = model.text.deep_clone();
    let table = text.get("text.embed.weight")?.clone();
    table.set_requires_grad(true);
    let dim = table.shape()[1];
    let rows: Vec<usize> = cfg.train_tokens.iter().map(|w| model.vocab.id(&w.to_lowercase())).collect();
    let mut trainable = lora.trainable();
    trainable.push(("text.embed.weight".into(), table.clone()));
    let net = UNet::new(&model.unet_config, lora.base(), Some(lora));
    let looper = Loop {
        cfg,
        data,
        schedule: &model.schedule,
        outputs,
    };
    let meta = serde_json::to_value(cfg)?;
    let report = looper.run(
        &trainable,
        |x0, ids, t, rng| {
            let cond = encode_text(ids, &text)?;
            ddpm_loss(&net, x0, t, &cond, &model.schedule, rng)
        },
        || {
            table.update_grad(|g| {
                for (r, row) in g.chunks_mut(dim).enumerate() {
                    if !rows.contains(&r) {
                        row.fill(0.0);
                    }
                }
            })
        },
        |step| adapter_checkpoint(lora, &text, base_path, step, meta.clone()),
    )?;
    table.set_requires_grad(false);
    let checkpoint = adapter_checkpoint(lora, &text, base_path, cfg.total_steps as u64, json!(cfg))?;
    Ok(LoraRun {
        report,
        text,
        checkpoint,
    })
}

#[derive(Clone, Debug)]
pub struct AutoencoderRun {
    pub autoencoder: Autoencoder,
    pub losses: Vec<f64>,
    pub held_out_mse: f64,
}

/// Reconstruction training on `train`, reporting MSE on `held_out`.
pub fn train_autoencoder(
    ae: Autoencoder,
    train: &[Tensor],
    held_out: &[Tensor],
    steps: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<AutoencoderRun> {
    if train.is_empty() {
        return Err(Error::Config("autoencoder training set is empty".into()));
    }
    let mut rng = Rng::new(seed);
    let mut opt = Adam::new();
    ae.params.set_requires_grad(true);
    let mut losses = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<Tensor> = (0..batch_size.max(1)).map(|_| train[rng.below(train.len())].clone()).collect();
        let loss = ae_train_step(&ae.config, &ae.params, &batch, &mut opt, lr)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, lr });
        }
        losses.push(loss);
    }
    ae.params.set_requires_grad(false);
    let held_out_mse = if held_out.is_empty() {
        f64::NAN
    } else {
        ae_eval_loss(&ae.config, &ae.params, held_out)?
    };
    Ok(AutoencoderRun {
        autoencoder: ae,
        losses,
        held_out_mse,
    })
}
