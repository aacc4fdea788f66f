//! Reverse-mode differentiable tensor engine.
//!
//! Provides the [`Tensor`] graph type, the differentiable primitives in
//! [`ops`], the Adam optimizer, a portable seeded [`Rng`] and a
//! finite-difference gradient checker.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod real;
pub mod rng;
pub mod tensor;
pub mod verify;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport, ScalarFn};
pub use optim::{adam_step, Adam, AdamState};
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
