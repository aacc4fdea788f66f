//! Differentiable primitives.
//!
//! Every op validates shapes, produces a fresh tensor and, when any input
//! tracks gradients, records a closure computing the vector-Jacobian product.

mod conv;
mod elementwise;
mod embed;
mod linalg;
mod loss;
mod norm;

pub use conv::conv2d;
pub use elementwise::concat;
pub use embed::embed;
pub use linalg::{attention, linear, matmul};
pub use loss::{cosine_sim, cross_entropy, mse};
pub use norm::group_norm;

use crate::real::Real;

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
