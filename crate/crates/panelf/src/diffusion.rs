//! DDPM forward process, ε-prediction objective and ancestral sampler.
//!
//! Timesteps are 1-based: `t ∈ [1, T]`. Schedule tables are kept in `f64`.

use panelf_core::ops::mse;
use panelf_core::{Rng, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNet;

pub const DEFAULT_STEPS: usize = 100;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linear variance schedule with derived `α_t` and `ᾱ_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// `β_t` linear from `beta_start` (t = 1) to `beta_end` (t = T) inclusive.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs T >= 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::Config(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let span = (steps - 1) as f64;
    let beta: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule { beta, alpha, alpha_bar })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(Error::Index(format!("timestep {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.beta[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alpha[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bar[self.idx(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }
}

fn combine(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Config(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| (ca * x as f64 + cb * y as f64) as f32)
        .collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

/// Closed-form marginal `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let ab = s.alpha_bar(t)?;
    combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One step of the forward chain: `x_t = √(1−β_t)·x_{t−1} + √β_t·z`.
pub fn q_step(x_prev: &Tensor, t: usize, z: &Tensor, s: &NoiseSchedule) -> Result<Tensor> {
    let b = s.beta(t)?;
    combine(x_prev, (1.0 - b).sqrt(), z, b.sqrt())
}

/// Anything that predicts the noise in `x_t` at step `t` under condition `cond`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor>;
}

impl NoisePredictor for UNet<'_, f32> {
    fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        self.forward(x_t, t, cond)
    }
}

/// `mse(ε, ε_θ(q_sample(x0, t, ε), t, cond))` for a given `ε`.
pub fn ddpm_loss_with_noise(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
    cond: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let x_t = q_sample(x0, t, eps, s)?;
    let pred = model.predict(&x_t, t, cond)?;
    if pred.shape() != eps.shape() {
        return Err(Error::Config(format!(
            "predictor returned {:?} for input {:?}",
            pred.shape(),
            eps.shape()
        )));
    }
    Ok(mse(&pred, eps)?)
}

/// Noise-prediction objective with `ε ~ N(0, I)` drawn from `rng`.
pub fn ddpm_loss(
    model: &dyn NoisePredictor,
    x0: &Tensor,
    t: usize,
    cond: &Tensor,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let eps = rng.normal_tensor(x0.shape())?;
    ddpm_loss_with_noise(model, x0, t, &eps, cond, s)
}

/// One reverse step with fixed variance `σ_t² = β_t`; no noise is added at `t = 1`.
pub fn p_sample_step(
    model: &dyn NoisePredictor,
    x_t: &Tensor,
    t: usize,
    cond: &Tensor,
    s: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<Tensor> {
    let (beta, alpha, ab) = (s.beta(t)?, s.alpha(t)?, s.alpha_bar(t)?);
    let eps = model.predict(x_t, t, cond)?.detach();
    let inv = 1.0 / alpha.sqrt();
    let mean = combine(x_t, inv, &eps, -inv * beta / (1.0 - ab).sqrt())?;
    if t == 1 {
        return Ok(mean);
    }
    let z = rng.normal_tensor(x_t.shape())?;
    combine(&mean, 1.0, &z, beta.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Clamp the final sample to `[-1, 1]`.
    pub clip_output: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 0,
            clip_output: true,
        }
    }
}

/// Runs the reverse chain from `x_start` at `t_start` down to `t = 1`.
pub fn denoise_from(
    model: &dyn NoisePredictor,
    x_start: &Tensor,
    t_start: usize,
    cond: &Tensor,
    s: &NoiseSchedule,
    rng: &mut Rng,
    clip_output: bool,
) -> Result<Tensor> {
    if t_start > s.steps() {
        return Err(Error::Index(format!("start step {t_start} beyond T = {}", s.steps())));
    }
    let mut x = x_start.detach();
    for t in (1..=t_start).rev() {
        x = p_sample_step(model, &x, t, cond, s, rng)?;
    }
    if clip_output {
        let clipped = x.data().iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        x = Tensor::new(x.shape().to_vec(), clipped)?;
    }
    Ok(x)
}

/// Draws `x_T ~ N(0, I)` from the seed, then denoises through every step.
pub fn sample(
    model: &dyn NoisePredictor,
    shape: &[usize],
    cond: &Tensor,
    s: &NoiseSchedule,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    let mut rng = Rng::new(cfg.seed);
    let x_t = rng.normal_tensor(shape)?;
    denoise_from(model, &x_t, s.steps(), cond, s, &mut rng, cfg.clip_output)
}

/// Partially noises `x_in` for image-to-image starts.
///
/// `t_start = round(strength·T)`. At `t_start = 0` the input is returned as is;
/// at `t_start = T` the start is a pure `N(0, I)` draw, the same first draw
/// [`sample`] makes for that seed; otherwise it is `q_sample(x_in, t_start, ε)`.
pub fn noise_to_step(x_in: &Tensor, strength: f64, s: &NoiseSchedule, rng: &mut Rng) -> Result<(Tensor, usize)> {
    if !(0.0..=1.0).contains(&strength) {
        return Err(Error::Config(format!("strength {strength} outside [0, 1]")));
    }
    let t_start = (strength * s.steps() as f64).round() as usize;
    if t_start == 0 {
        return Ok((x_in.detach(), 0));
    }
    let eps = rng.normal_tensor(x_in.shape())?;
    if t_start == s.steps() {
        return Ok((eps, t_start));
    }
    Ok((q_sample(x_in, t_start, &eps, s)?, t_start))
}
