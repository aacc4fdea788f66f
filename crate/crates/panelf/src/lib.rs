//! Diffusion style-transfer toolkit: a small U-Net noise predictor trained
//! with DDPM, fine-tuned through low-rank adapters on comic panels, plus the
//! data preparation and generation pipelines around it.

pub mod data;
pub mod diffusion;
pub mod error;
pub mod lora;
pub mod model;
pub mod pipelines;
pub mod text;
pub mod train;

pub use error::{Error, Result};
