//! Time-conditioned U-Net noise predictor with text cross-attention.
//!
//! Layout for `depth = d` with channel widths `c_i = base * 2^i`:
//!
//! ```text
//! conv_in -> [res_i (+attn_i) -> pool]_{i<d} -> mid.res (+mid.attn)
//!         -> [upsample -> concat skip_i -> up.res_i (+up.attn_i)]_{i=d-1..0} -> norm/silu/conv_out
//! ```
//!
//! Attention blocks hold one self-attention and one cross-attention layer
//! whose projections live at `<block>.attn.{self,cross}.to_{q,k,v,out}.weight`.

use std::collections::BTreeSet;

use panelf_core::ops::{self, attention, conv2d, group_norm, linear};
use panelf_core::{Real, Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::LoraSet;
use crate::model::params::ModelParams;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub time_embed_dim: usize,
    pub cond_dim: usize,
    /// Stage indices `0..depth` (encoder/decoder) or `depth` (bottleneck) that get attention.
    pub attn_resolutions: BTreeSet<usize>,
    pub image_size: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            base_channels: 32,
            depth: 2,
            time_embed_dim: 64,
            cond_dim: 64,
            attn_resolutions: BTreeSet::from([2]),
            image_size: 32,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage.min(self.depth.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("depth, in_channels and base_channels must be positive".into()));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!("time_embed_dim {} must be even and positive", self.time_embed_dim)));
        }
        if self.cond_dim == 0 {
            return Err(Error::Config("cond_dim must be positive".into()));
        }
        if self.image_size % (1 << self.depth) != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if let Some(bad) = self.attn_resolutions.iter().find(|&&s| s > self.depth) {
            return Err(Error::Config(format!("attention stage {bad} beyond depth {}", self.depth)));
        }
        Ok(())
    }

    fn groups_for(&self, channels: usize) -> usize {
        gcd(self.groups.max(1), channels)
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Sinusoidal embedding: entry `2i` is `sin(t / 10000^(2i/dim))`, entry `2i+1` the cosine.
pub fn time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("time embedding dim {dim} must be even and positive")));
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let arg = t as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    Ok(out)
}

fn init_res(p: &mut ModelParams, prefix: &str, cin: usize, cout: usize, tdim: usize, rng: &mut Rng) -> Result<()> {
    p.init_const(&format!("{prefix}.norm1.weight"), &[cin], 1.0)?;
    p.init_const(&format!("{prefix}.norm1.bias"), &[cin], 0.0)?;
    p.init_weight(&format!("{prefix}.conv1.weight"), &[cout, cin, 3, 3], rng)?;
    p.init_const(&format!("{prefix}.conv1.bias"), &[cout], 0.0)?;
    p.init_weight(&format!("{prefix}.time.weight"), &[cout, tdim], rng)?;
    p.init_const(&format!("{prefix}.time.bias"), &[cout], 0.0)?;
    p.init_const(&format!("{prefix}.norm2.weight"), &[cout], 1.0)?;
    p.init_const(&format!("{prefix}.norm2.bias"), &[cout], 0.0)?;
    p.init_weight(&format!("{prefix}.conv2.weight"), &[cout, cout, 3, 3], rng)?;
    p.init_const(&format!("{prefix}.conv2.bias"), &[cout], 0.0)?;
    if cin != cout {
        p.init_weight(&format!("{prefix}.skip.weight"), &[cout, cin, 1, 1], rng)?;
        p.init_const(&format!("{prefix}.skip.bias"), &[cout], 0.0)?;
    }
    Ok(())
}

fn init_attn(p: &mut ModelParams, prefix: &str, ch: usize, cond_dim: usize, rng: &mut Rng) -> Result<()> {
    p.init_const(&format!("{prefix}.norm.weight"), &[ch], 1.0)?;
    p.init_const(&format!("{prefix}.norm.bias"), &[ch], 0.0)?;
    for (kind, kv_dim) in [("self", ch), ("cross", cond_dim)] {
        p.init_weight(&format!("{prefix}.{kind}.to_q.weight"), &[ch, ch], rng)?;
        p.init_weight(&format!("{prefix}.{kind}.to_k.weight"), &[ch, kv_dim], rng)?;
        p.init_weight(&format!("{prefix}.{kind}.to_v.weight"), &[ch, kv_dim], rng)?;
        p.init_weight(&format!("{prefix}.{kind}.to_out.weight"), &[ch, ch], rng)?;
    }
    Ok(())
}

/// Fresh parameters: truncated-normal weights, zero biases, unit norm scales,
/// and a zero output convolution.
pub fn init_unet(cfg: &UNetConfig, rng: &mut Rng) -> Result<ModelParams> {
    cfg.validate()?;
    let mut p = ModelParams::new();
    let td = cfg.time_embed_dim;
    p.init_weight("time.fc1.weight", &[td, td], rng)?;
    p.init_const("time.fc1.bias", &[td], 0.0)?;
    p.init_weight("time.fc2.weight", &[td, td], rng)?;
    p.init_const("time.fc2.bias", &[td], 0.0)?;
    let c0 = cfg.channels(0);
    p.init_weight("conv_in.weight", &[c0, cfg.in_channels, 3, 3], rng)?;
    p.init_const("conv_in.bias", &[c0], 0.0)?;

    let mut prev = c0;
    for s in 0..cfg.depth {
        let ch = cfg.channels(s);
        init_res(&mut p, &format!("down.{s}.res"), prev, ch, td, rng)?;
        if cfg.attn_resolutions.contains(&s) {
            init_attn(&mut p, &format!("down.{s}.attn"), ch, cfg.cond_dim, rng)?;
        }
        prev = ch;
    }
    init_res(&mut p, "mid.res", prev, prev, td, rng)?;
    if cfg.attn_resolutions.contains(&cfg.depth) {
        init_attn(&mut p, "mid.attn", prev, cfg.cond_dim, rng)?;
    }
    for s in (0..cfg.depth).rev() {
        let ch = cfg.channels(s);
        init_res(&mut p, &format!("up.{s}.res"), prev + ch, ch, td, rng)?;
        if cfg.attn_resolutions.contains(&s) {
            init_attn(&mut p, &format!("up.{s}.attn"), ch, cfg.cond_dim, rng)?;
        }
        prev = ch;
    }
    p.init_const("out.norm.weight", &[c0], 1.0)?;
    p.init_const("out.norm.bias", &[c0], 0.0)?;
    p.init_const("out.conv.weight", &[cfg.in_channels, c0, 3, 3], 0.0)?;
    p.init_const("out.conv.bias", &[cfg.in_channels], 0.0)?;
    Ok(p)
}

/// A U-Net evaluation context: config, parameters and optional low-rank adapters.
pub struct UNet<'a, T: Real = f32> {
    pub cfg: &'a UNetConfig,
    pub params: &'a ModelParams<T>,
    pub lora: Option<&'a LoraSet<T>>,
}

impl<'a, T: Real> UNet<'a, T> {
    pub fn new(cfg: &'a UNetConfig, params: &'a ModelParams<T>, lora: Option<&'a LoraSet<T>>) -> Self {
        UNet { cfg, params, lora }
    }

    fn p(&self, path: &str) -> Result<&Tensor<T>> {
        self.params.get(path)
    }

    /// `x W^T` through the adapter registered for `path`, if any.
    fn project(&self, x: &Tensor<T>, path: &str) -> Result<Tensor<T>> {
        let w = self.p(path)?;
        match self.lora.and_then(|l| l.adapter(path)) {
            Some(a) => a.effective_forward(w, x),
            None => Ok(linear(x, w, None)?),
        }
    }

    fn conv(&self, x: &Tensor<T>, prefix: &str, pad: usize) -> Result<Tensor<T>> {
        let y = conv2d(x, self.p(&format!("{prefix}.weight"))?, 1, pad)?;
        Ok(y.add_channel_bias(self.p(&format!("{prefix}.bias"))?)?)
    }

    fn norm(&self, x: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let groups = self.cfg.groups_for(x.shape()[0]);
        Ok(group_norm(
            x,
            groups,
            self.p(&format!("{prefix}.weight"))?,
            self.p(&format!("{prefix}.bias"))?,
        )?)
    }

    fn res_block(&self, x: &Tensor<T>, temb: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let h = self.norm(x, &format!("{prefix}.norm1"))?.silu()?;
        let h = self.conv(&h, &format!("{prefix}.conv1"), 1)?;
        let tproj = linear(
            temb,
            self.p(&format!("{prefix}.time.weight"))?,
            Some(self.p(&format!("{prefix}.time.bias"))?),
        )?;
        let cout = h.shape()[0];
        let h = h.add_channel_bias(&tproj.reshape(vec![cout])?)?;
        let h = self.norm(&h, &format!("{prefix}.norm2"))?.silu()?;
        let h = self.conv(&h, &format!("{prefix}.conv2"), 1)?;
        let skip_path = format!("{prefix}.skip");
        let skip = if self.params.contains(&format!("{skip_path}.weight")) {
            self.conv(x, &skip_path, 0)?
        } else {
            x.clone()
        };
        Ok(skip.add(&h)?)
    }

    fn attend(&self, tokens: &Tensor<T>, context: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let q = self.project(tokens, &format!("{prefix}.to_q.weight"))?;
        let k = self.project(context, &format!("{prefix}.to_k.weight"))?;
        let v = self.project(context, &format!("{prefix}.to_v.weight"))?;
        let a = attention(&q, &k, &v)?;
        self.project(&a, &format!("{prefix}.to_out.weight"))
    }

    /// Self-attention over spatial tokens, then cross-attention to the text condition.
    fn attn_block(&self, x: &Tensor<T>, cond: &Tensor<T>, prefix: &str) -> Result<Tensor<T>> {
        let &[c, h, w] = x.shape() else {
            unreachable!("feature maps are [C,H,W]")
        };
        let tokens = self
            .norm(x, &format!("{prefix}.norm"))?
            .reshape(vec![c, h * w])?
            .transpose()?;
        let s = self.attend(&tokens, &tokens, &format!("{prefix}.self"))?;
        let t1 = tokens.add(&s)?;
        let xattn = self.attend(&t1, cond, &format!("{prefix}.cross"))?;
        let delta = s.add(&xattn)?.transpose()?.reshape(vec![c, h, w])?;
        Ok(x.add(&delta)?)
    }

    fn time_mlp(&self, t: usize) -> Result<Tensor<T>> {
        let td = self.cfg.time_embed_dim;
        let emb = Tensor::<T>::from_f64(vec![1, td], &time_embedding(t, td)?)?;
        let h = linear(&emb, self.p("time.fc1.weight")?, Some(self.p("time.fc1.bias")?))?.silu()?;
        let h = linear(&h, self.p("time.fc2.weight")?, Some(self.p("time.fc2.bias")?))?;
        Ok(h.silu()?)
    }

    /// Predicts the noise in `x_t` (`[C, H, W]`) at step `t` given `cond` (`[L, cond_dim]`).
    pub fn forward(&self, x: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let &[c, h, w] = x.shape() else {
            return Err(Error::Config(format!("U-Net input must be [C,H,W], got {:?}", x.shape())));
        };
        let div = 1 << cfg.depth;
        if c != cfg.in_channels || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "input {:?} incompatible with {} channels and depth {}",
                x.shape(),
                cfg.in_channels,
                cfg.depth
            )));
        }
        if cond.shape().len() != 2 || cond.shape()[1] != cfg.cond_dim {
            return Err(Error::Config(format!(
                "condition must be [L, {}], got {:?}",
                cfg.cond_dim,
                cond.shape()
            )));
        }
        let temb = self.time_mlp(t)?;
        let mut hcur = self.conv(x, "conv_in", 1)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            hcur = self.res_block(&hcur, &temb, &format!("down.{s}.res"))?;
            if cfg.attn_resolutions.contains(&s) {
                hcur = self.attn_block(&hcur, cond, &format!("down.{s}.attn"))?;
            }
            skips.push(hcur.clone());
            hcur = hcur.avg_pool2x()?;
        }
        hcur = self.res_block(&hcur, &temb, "mid.res")?;
        if cfg.attn_resolutions.contains(&cfg.depth) {
            hcur = self.attn_block(&hcur, cond, "mid.attn")?;
        }
        for s in (0..cfg.depth).rev() {
            let up = hcur.upsample2x()?;
            let cat = ops::concat(&[up, skips[s].clone()])?;
            hcur = self.res_block(&cat, &temb, &format!("up.{s}.res"))?;
            if cfg.attn_resolutions.contains(&s) {
                hcur = self.attn_block(&hcur, cond, &format!("up.{s}.attn"))?;
            }
        }
        let out = self.norm(&hcur, "out.norm")?.silu()?;
        self.conv(&out, "out.conv", 1)
    }
}

/// Functional form of [`UNet::forward`].
pub fn unet_forward<T: Real>(
    cfg: &UNetConfig,
    params: &ModelParams<T>,
    lora: Option<&LoraSet<T>>,
    x: &Tensor<T>,
    t: usize,
    cond: &Tensor<T>,
) -> Result<Tensor<T>> {
    UNet::new(cfg, params, lora).forward(x, t, cond)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> UNetConfig {
        UNetConfig {
            in_channels: 1,
            base_channels: 4,
            depth: 1,
            time_embed_dim: 8,
            cond_dim: 6,
            attn_resolutions: BTreeSet::from([1]),
            image_size: 8,
            groups: 2,
        }
    }

    #[test]
    fn embedding_range_and_zero_pattern() {
        let e = time_embedding(37, 16).unwrap();
        assert!(e.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(e, time_embedding(37, 16).unwrap());
        let z = time_embedding(0, 6).unwrap();
        assert_eq!(z, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(time_embedding(3, 5).is_err());
    }

    #[test]
    fn output_shape_matches_input() {
        let mut rng = Rng::new(0);
        for depth in 1..=2 {
            let cfg = UNetConfig {
                depth,
                attn_resolutions: BTreeSet::from([0, depth]),
                ..tiny()
            };
            let p = init_unet(&cfg, &mut rng).unwrap();
            let x = rng.normal_tensor(&[1, 8, 8]).unwrap();
            let cond = rng.normal_tensor(&[3, 6]).unwrap();
            for t in [1, 50, 100] {
                let y = unet_forward(&cfg, &p, None, &x, t, &cond).unwrap();
                assert_eq!(y.shape(), x.shape());
            }
        }
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = UNetConfig { depth: 2, ..tiny() };
        let p = init_unet(&cfg, &mut Rng::new(1)).unwrap();
        let x = Tensor::<f32>::zeros(vec![1, 6, 6]);
        let cond = Tensor::<f32>::zeros(vec![2, 6]);
        assert!(matches!(unet_forward(&cfg, &p, None, &x, 1, &cond), Err(Error::Config(_))));
        let bad = UNetConfig { image_size: 12, depth: 3, ..tiny() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let cfg = tiny();
        let mut rng = Rng::new(2);
        let p = init_unet(&cfg, &mut rng).unwrap();
        let x = rng.normal_tensor(&[1, 8, 8]).unwrap();
        let cond = rng.normal_tensor(&[2, 6]).unwrap();
        let y = unet_forward(&cfg, &p, None, &x, 5, &cond).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_paths_are_addressable() {
        let cfg = UNetConfig {
            attn_resolutions: BTreeSet::from([0, 1]),
            ..tiny()
        };
        let p = init_unet(&cfg, &mut Rng::new(3)).unwrap();
        let attn: Vec<_> = p.paths().filter(|s| s.contains(".attn.") && s.contains(".to_")).collect();
        // down.0, mid and up.0 blocks, each with self + cross, four projections apiece.
        assert_eq!(attn.len(), 3 * 2 * 4);
    }
}
