//! Finite-difference verification of reverse-mode gradients.
//!
//! The analytic gradient comes from the production `f32` graph; the
//! reference is a central difference of the same function evaluated in `f64`.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// A scalar-valued function that can be evaluated at either precision.
pub trait ScalarFn {
    fn eval<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Largest magnitude among the numeric derivatives.
    pub max_abs_numeric: f64,
    pub worst_index: usize,
}

/// Relative floor as a fraction of the largest numeric derivative.
///
/// Entries far below the gradient's overall scale are compared against
/// that scale rather than their own magnitude.
const REL_FLOOR: f64 = 1e-3;

/// Compares the backward gradient of `f` at `x` with a central difference of step `h`.
pub fn grad_check<F: ScalarFn + ?Sized>(f: &F, x: &Tensor<f64>, h: f64) -> Result<GradCheckReport> {
    if !(1e-5..=1e-2).contains(&h) {
        return Err(TensorError::Contract(format!("finite-difference step {h} outside [1e-5, 1e-2]")));
    }
    let shape = x.shape().to_vec();
    let base = x.to_vec();

    let xa: Tensor<f32> = Tensor::param(shape.clone(), base.iter().map(|&v| v as f32).collect())?;
    let y = f.eval(&xa)?;
    if y.numel() != 1 {
        return Err(TensorError::Contract(format!("grad_check needs a scalar function, got shape {:?}", y.shape())));
    }
    y.backward()?;
    let analytic: Vec<f64> = match xa.grad() {
        Some(g) => g.iter().map(|&v| v as f64).collect(),
        None => vec![0.0; base.len()],
    };

    let mut numeric = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f.eval(&Tensor::<f64>::new(shape.clone(), probe.clone())?)?.item()?;
        probe[i] = base[i] - h;
        let minus = f.eval(&Tensor::<f64>::new(shape.clone(), probe.clone())?)?.item()?;
        probe[i] = base[i];
        numeric[i] = (plus - minus) / (2.0 * h);
    }

    let max_abs_numeric = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (REL_FLOOR * max_abs_numeric).max(1e-12);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        max_abs_numeric,
        worst_index: 0,
    };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_err = report.max_abs_err.max(abs);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
    }
    Ok(report)
}
