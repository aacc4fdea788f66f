//! Full models and fine-tuned adapters as checkpoint files.

use std::path::{Path, PathBuf};

use panelf_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diffusion::{make_schedule, NoiseSchedule, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::{ae_decode, ae_encode, init_autoencoder, init_unet, AutoencoderConfig, ModelParams, UNet, UNetConfig};
use crate::text::{encode_text, init_text_encoder, tokenize, Vocab};
use crate::train::checkpoint::{load_checkpoint, Checkpoint, CheckpointInfo};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// A trained autoencoder.
#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AutoencoderConfig,
    pub params: ModelParams,
}

impl Autoencoder {
    pub fn new(config: AutoencoderConfig, seed: u64) -> Result<Self> {
        let params = init_autoencoder(&config, &mut Rng::new(seed))?;
        Ok(Autoencoder { config, params })
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(ae_encode(&self.config, &self.params, x)?.detach())
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        Ok(ae_decode(&self.config, &self.params, z)?.detach())
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            tensors: self.params.clone(),
            info: CheckpointInfo {
                adapter_only: false,
                step,
                config: json!({ "kind": "autoencoder", "autoencoder": self.config }),
            },
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        expect_kind(&ckpt.info.config, "autoencoder")?;
        let config: AutoencoderConfig = serde_json::from_value(ckpt.info.config["autoencoder"].clone())?;
        Ok(Autoencoder {
            config,
            params: ckpt.tensors.clone(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn expect_kind(config: &Value, kind: &str) -> Result<()> {
    match config.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Config(format!("expected a `{kind}` checkpoint, found {other:?}"))),
    }
}

/// Base diffusion model: U-Net, text encoder, vocabulary, schedule, and an
/// optional autoencoder that switches diffusion into latent space.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub unet_config: UNetConfig,
    pub unet: ModelParams,
    pub text: ModelParams,
    pub vocab: Vocab,
    pub schedule_config: ScheduleConfig,
    pub schedule: NoiseSchedule,
    pub autoencoder: Option<Autoencoder>,
}

impl DiffusionModel {
    /// Freshly initialized model. In latent mode the U-Net geometry must match the latents.
    pub fn new(
        unet_config: UNetConfig,
        schedule_config: ScheduleConfig,
        vocab: Vocab,
        autoencoder: Option<Autoencoder>,
        seed: u64,
    ) -> Result<Self> {
        if let Some(ae) = &autoencoder {
            if unet_config.in_channels != ae.config.latent_channels {
                return Err(Error::Config(format!(
                    "latent mode needs {} U-Net input channels, got {}",
                    ae.config.latent_channels, unet_config.in_channels
                )));
            }
        }
        let mut rng = Rng::new(seed);
        let unet = init_unet(&unet_config, &mut rng)?;
        let text = init_text_encoder(vocab.len(), unet_config.cond_dim, &mut rng)?;
        let schedule = schedule_config.build()?;
        Ok(DiffusionModel {
            unet_config,
            unet,
            text,
            vocab,
            schedule_config,
            schedule,
            autoencoder,
        })
    }

    pub fn latent_mode(&self) -> bool {
        self.autoencoder.is_some()
    }

    /// Shape of the tensors the sampler works on.
    pub fn sample_shape(&self) -> Vec<usize> {
        let s = self.unet_config.image_size;
        vec![self.unet_config.in_channels, s, s]
    }

    /// Image tensor `[1, H, W]` in `[-1, 1]` to diffusion space.
    pub fn to_model_space(&self, img: &Tensor) -> Result<Tensor> {
        match &self.autoencoder {
            Some(ae) => ae.encode(img),
            None => Ok(img.detach()),
        }
    }

    pub fn to_image_space(&self, x: &Tensor) -> Result<Tensor> {
        match &self.autoencoder {
            Some(ae) => ae.decode(x),
            None => Ok(x.detach()),
        }
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        let mut tensors = self.unet.prefixed("unet");
        tensors.extend(self.text.clone())?;
        if let Some(ae) = &self.autoencoder {
            tensors.extend(ae.params.prefixed("ae"))?;
        }
        let config = json!({
            "kind": "model",
            "unet": self.unet_config,
            "schedule": self.schedule_config,
            "vocab": self.vocab.to_text(),
            "autoencoder": self.autoencoder.as_ref().map(|a| &a.config),
        });
        Ok(Checkpoint {
            tensors,
            info: CheckpointInfo {
                adapter_only: false,
                step,
                config,
            },
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.info.config;
        expect_kind(cfg, "model")?;
        let unet_config: UNetConfig = serde_json::from_value(cfg["unet"].clone())?;
        let schedule_config: ScheduleConfig = serde_json::from_value(cfg["schedule"].clone())?;
        let vocab = Vocab::from_text(cfg["vocab"].as_str().unwrap_or_default())?;
        let ae_config: Option<AutoencoderConfig> = serde_json::from_value(cfg["autoencoder"].clone())?;
        let unet = ckpt.tensors.sub("unet");
        let mut text = ModelParams::new();
        for (k, v) in ckpt.tensors.iter().filter(|(k, _)| k.starts_with("text.")) {
            text.insert(k, v.clone())?;
        }
        let autoencoder = ae_config.map(|config| Autoencoder {
            config,
            params: ckpt.tensors.sub("ae"),
        });
        let model = DiffusionModel {
            schedule: schedule_config.build()?,
            unet_config,
            unet,
            text,
            vocab,
            schedule_config,
            autoencoder,
        };
        model.check_parameters()?;
        Ok(model)
    }

    /// Every parameter of a fresh model of this configuration is present with the same shape.
    fn check_parameters(&self) -> Result<()> {
        let fresh = init_unet(&self.unet_config, &mut Rng::new(0))?;
        for (path, t) in fresh.iter() {
            let got = self.unet.get(path).map_err(|_| Error::Compatibility {
                path: format!("unet.{path}"),
                detail: "missing from checkpoint".into(),
            })?;
            if got.shape() != t.shape() {
                return Err(Error::Compatibility {
                    path: format!("unet.{path}"),
                    detail: format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                });
            }
        }
        let table = self.text.get("text.embed.weight")?;
        if table.shape() != [self.vocab.len(), self.unet_config.cond_dim] {
            return Err(Error::Compatibility {
                path: "text.embed.weight".into(),
                detail: format!("shape {:?} does not fit vocabulary and cond_dim", table.shape()),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, step: u64) -> Result<()> {
        self.to_checkpoint(step)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Adapter-only checkpoint: adapter factors plus the fine-tuned text table,
/// pointing at its base model by path.
pub fn adapter_checkpoint(lora: &LoraSet, text: &ModelParams, base: Option<&Path>, step: u64, extra: Value) -> Result<Checkpoint> {
    let mut tensors = lora.to_tensors();
    tensors.extend(text.clone())?;
    let config = json!({
        "kind": "adapter",
        "base": base.map(|p| p.display().to_string()),
        "rank": lora.adapters().first().map(|a| a.rank),
        "targets": lora.adapters().iter().map(|a| a.target_path.clone()).collect::<Vec<_>>(),
        "train": extra,
    });
    Ok(Checkpoint {
        tensors,
        info: CheckpointInfo {
            adapter_only: true,
            step,
            config,
        },
    })
}

/// What the generation pipelines run: a base model, optional adapters, and
/// the text table to encode prompts with.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub model: DiffusionModel,
    pub lora: Option<LoraSet>,
    pub text: ModelParams,
}

impl ModelBundle {
    pub fn base(model: DiffusionModel) -> Self {
        let text = model.text.clone();
        ModelBundle { model, lora: None, text }
    }

    /// Attaches adapters and a fine-tuned text table loaded from an adapter checkpoint.
    pub fn with_adapters(model: DiffusionModel, ckpt: &Checkpoint) -> Result<Self> {
        if !ckpt.info.adapter_only {
            return Err(Error::Config("not an adapter checkpoint".into()));
        }
        let lora = LoraSet::from_tensors(&ckpt.tensors, &model.unet)?;
        let table = ckpt.tensors.get("text.embed.weight")?;
        let base_table = model.text.get("text.embed.weight")?;
        if table.shape() != base_table.shape() {
            return Err(Error::Compatibility {
                path: "text.embed.weight".into(),
                detail: format!("shape {:?}, base has {:?}", table.shape(), base_table.shape()),
            });
        }
        let mut text = ModelParams::new();
        text.insert("text.embed.weight", table.detach())?;
        Ok(ModelBundle {
            model,
            lora: Some(lora),
            text,
        })
    }

    /// Loads a full model, or an adapter checkpoint together with the base it names.
    ///
    /// A relative base path is tried as given, then next to the adapter file.
    pub fn load(path: &Path) -> Result<Self> {
        let (tensors, info) = load_checkpoint(path)?;
        let ckpt = Checkpoint { tensors, info };
        if !ckpt.info.adapter_only {
            return Ok(Self::base(DiffusionModel::from_checkpoint(&ckpt)?));
        }
        expect_kind(&ckpt.info.config, "adapter")?;
        let base = ckpt.info.config["base"]
            .as_str()
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("{} does not name its base model", path.display())))?;
        let base = if base.exists() || base.is_absolute() {
            base
        } else {
            path.parent().unwrap_or(Path::new(".")).join(base)
        };
        Self::with_adapters(DiffusionModel::load(&base)?, &ckpt)
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.model.schedule
    }

    pub fn predictor(&self) -> UNet<'_> {
        UNet::new(&self.model.unet_config, &self.model.unet, self.lora.as_ref())
    }

    /// Prompt conditioning `[L, cond_dim]`, detached from any graph.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Tensor> {
        Ok(encode_text(&tokenize(prompt, &self.model.vocab), &self.text)?.detach())
    }

    /// Base model only: adapters removed and the base text table restored.
    pub fn without_adapters(&self) -> Self {
        Self::base(self.model.clone())
    }
}

