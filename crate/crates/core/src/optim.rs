//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_betas(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(len: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            beta1,
            beta2,
            eps,
        }
    }
}

/// One Adam update of `param` from its accumulated gradient, which is then cleared.
pub fn adam_step(param: &Tensor<f32>, state: &mut AdamState, lr: f64) -> Result<()> {
    let grad = param
        .take_grad()
        .ok_or_else(|| TensorError::Contract("adam_step on a parameter without gradient".into()))?;
    if state.m.len() != grad.len() || state.v.len() != grad.len() {
        return Err(TensorError::Contract(format!(
            "optimizer state sized {} for parameter of {} elements",
            state.m.len(),
            grad.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    param.update_data(|data| {
        for (i, p) in data.iter_mut().enumerate() {
            let g = grad[i] as f64;
            let m = b1 * state.m[i] as f64 + (1.0 - b1) * g;
            let v = b2 * state.v[i] as f64 + (1.0 - b2) * g * g;
            state.m[i] = m as f32;
            state.v[i] = v as f32;
            let step = lr * (m / c1) / ((v / c2).sqrt() + eps);
            *p = (*p as f64 - step) as f32;
        }
    })
}

/// Adam over a named parameter set; states are created on first use.
#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Updates every parameter that received a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>, lr: f64) -> Result<()> {
        for (name, p) in params {
            if !p.has_grad() {
                continue;
            }
            let state = self
                .states
                .entry(name.to_string())
                .or_insert_with(|| AdamState::new(p.numel()));
            adam_step(p, state, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: f32, grad: f32) -> Tensor<f32> {
        let p = Tensor::param(vec![1], vec![value]).unwrap();
        p.scale(grad as f64).unwrap().sum().unwrap().backward().unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_param() {
        let p = with_grad(0.5, 0.0);
        let mut s = AdamState::new(1);
        adam_step(&p, &mut s, 1e-3).unwrap();
        assert_eq!(p.to_vec(), vec![0.5]);
        assert_eq!(s.step_count, 1);
        assert!(!p.has_grad());
    }

    #[test]
    fn unit_gradient_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is lr / (1 + eps).
        let p = with_grad(1.0, 1.0);
        let mut s = AdamState::new(1);
        adam_step(&p, &mut s, 1e-2).unwrap();
        let expected = 1.0 - 1e-2 / (1.0 + 1e-8);
        assert!((p.to_vec()[0] as f64 - expected).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_contract_error() {
        let p = Tensor::param(vec![1], vec![1.0f32]).unwrap();
        let mut s = AdamState::new(1);
        assert!(matches!(adam_step(&p, &mut s, 1e-3), Err(TensorError::Contract(_))));
        assert_eq!(s.step_count, 0);
    }

    #[test]
    fn identical_runs_identical_trajectories() {
        let run = || {
            let p = Tensor::param(vec![3], vec![0.1f32, -0.2, 0.3]).unwrap();
            let mut s = AdamState::new(3);
            for _ in 0..20 {
                p.square().unwrap().sum().unwrap().backward().unwrap();
                adam_step(&p, &mut s, 1e-2).unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(), run());
    }
}
