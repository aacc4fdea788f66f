//! Noise-prediction U-Net and the perceptual-compression autoencoder.

mod autoencoder;
mod params;
mod unet;

pub use autoencoder::{
    ae_decode, ae_encode, ae_eval_loss, ae_train_step, init_autoencoder, AutoencoderConfig,
};
pub use params::{ModelParams, INIT_STD};
pub use unet::{init_unet, time_embedding, unet_forward, UNet, UNetConfig};
