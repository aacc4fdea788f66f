//! Convolutional autoencoder for latent-space diffusion.
//!
//! The encoder halves the resolution `m` times (downsampling factor
//! `f = 2^m`); the decoder mirrors it with nearest-neighbour upsampling.

use panelf_core::ops::{conv2d, mse};
use panelf_core::{Adam, Real, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderConfig {
    pub in_channels: usize,
    /// Downsampling exponent; `f = 2^m`.
    pub m: usize,
    pub latent_channels: usize,
    pub hidden: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        AutoencoderConfig {
            in_channels: 1,
            m: 2,
            latent_channels: 4,
            hidden: 32,
        }
    }
}

impl AutoencoderConfig {
    pub fn factor(&self) -> usize {
        1 << self.m
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = self.factor();
        if h % f != 0 || w % f != 0 {
            return Err(Error::Config(format!("downsampling factor {f} does not divide {h}x{w}")));
        }
        Ok(())
    }
}

/// Autoencoder convolutions use a fan-in scaled initializer (He normal); with
/// no normalization layers the shared 0.02 initializer collapses activations.
fn init_conv(p: &mut ModelParams, prefix: &str, cout: usize, cin: usize, rng: &mut Rng) -> Result<()> {
    let std = (2.0 / (cin * 9) as f32).sqrt();
    let w = rng.truncated_normal_vec(cout * cin * 9, std);
    p.insert(format!("{prefix}.weight"), Tensor::param(vec![cout, cin, 3, 3], w)?)?;
    p.init_const(&format!("{prefix}.bias"), &[cout], 0.0)
}

pub fn init_autoencoder(cfg: &AutoencoderConfig, rng: &mut Rng) -> Result<ModelParams> {
    let mut p = ModelParams::new();
    let hd = cfg.hidden;
    init_conv(&mut p, "enc.conv_in", hd, cfg.in_channels, rng)?;
    for i in 0..cfg.m {
        init_conv(&mut p, &format!("enc.down.{i}"), hd, hd, rng)?;
    }
    init_conv(&mut p, "enc.conv_out", cfg.latent_channels, hd, rng)?;
    init_conv(&mut p, "dec.conv_in", hd, cfg.latent_channels, rng)?;
    for i in 0..cfg.m {
        init_conv(&mut p, &format!("dec.up.{i}"), hd, hd, rng)?;
    }
    init_conv(&mut p, "dec.conv_out", cfg.in_channels, hd, rng)?;
    Ok(p)
}

fn conv<T: Real>(p: &ModelParams<T>, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
    let y = conv2d(x, p.get(&format!("{prefix}.weight"))?, 1, 1)?;
    Ok(y.add_channel_bias(p.get(&format!("{prefix}.bias"))?)?)
}

/// `E(x)`: `[C, H, W]` to `[latent_channels, H/f, W/f]`.
pub fn ae_encode<T: Real>(cfg: &AutoencoderConfig, p: &ModelParams<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Config(format!("encoder input must be [C,H,W], got {:?}", x.shape())));
    };
    if c != cfg.in_channels {
        return Err(Error::Config(format!("encoder expects {} channels, got {c}", cfg.in_channels)));
    }
    cfg.check_input(h, w)?;
    let mut hcur = conv(p, x, "enc.conv_in")?.silu()?;
    for i in 0..cfg.m {
        hcur = conv(p, &hcur.avg_pool2x()?, &format!("enc.down.{i}"))?.silu()?;
    }
    conv(p, &hcur, "enc.conv_out")
}

/// `D(z)`: `[latent_channels, h, w]` to `[C, h*f, w*f]`.
pub fn ae_decode<T: Real>(cfg: &AutoencoderConfig, p: &ModelParams<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    if z.shape().len() != 3 || z.shape()[0] != cfg.latent_channels {
        return Err(Error::Config(format!(
            "decoder expects [{}, h, w], got {:?}",
            cfg.latent_channels,
            z.shape()
        )));
    }
    let mut hcur = conv(p, z, "dec.conv_in")?.silu()?;
    for i in 0..cfg.m {
        hcur = conv(p, &hcur.upsample2x()?, &format!("dec.up.{i}"))?.silu()?;
    }
    conv(p, &hcur, "dec.conv_out")
}

/// One Adam step on the mean reconstruction error `|D(E(x)) - x|^2` over `batch`.
pub fn ae_train_step(
    cfg: &AutoencoderConfig,
    params: &ModelParams,
    batch: &[Tensor],
    opt: &mut Adam,
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty autoencoder batch".into()));
    }
    let mut total = 0.0;
    for x in batch {
        let recon = ae_decode(cfg, params, &ae_encode(cfg, params, x)?)?;
        let loss = mse(&recon, x)?.scale(1.0 / batch.len() as f64)?;
        total += loss.item()? as f64;
        loss.backward()?;
    }
    opt.step(params.iter(), lr)?;
    Ok(total)
}

/// Reconstruction loss without touching gradients or optimizer state.
pub fn ae_eval_loss(cfg: &AutoencoderConfig, params: &ModelParams, batch: &[Tensor]) -> Result<f64> {
    let frozen = params.deep_clone();
    frozen.set_requires_grad(false);
    let mut total = 0.0;
    for x in batch {
        let recon = ae_decode(cfg, &frozen, &ae_encode(cfg, &frozen, x)?)?;
        total += mse(&recon, x)?.item()? as f64;
    }
    Ok(total / batch.len().max(1) as f64)
}
