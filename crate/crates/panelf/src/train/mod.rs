//! Training loops, learning-rate schedule, model bundles, and checkpoint files.

mod bundle;
pub mod checkpoint;
mod schedule;
mod trainer;

pub use bundle::{adapter_checkpoint, Autoencoder, DiffusionModel, ModelBundle, ScheduleConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointInfo};
pub use schedule::{cosine_restart_lr, expected_pairs_per_timestep, sample_timestep};
pub use trainer::{
    train_autoencoder, train_base, train_lora, AutoencoderRun, Dataset, LogRecord, LoraRun, TrainConfig, TrainOutputs,
    TrainReport,
};
