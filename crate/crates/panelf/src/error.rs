use std::path::PathBuf;

use panelf_core::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("compatibility error at `{path}`: {detail}")]
    Compatibility { path: String, detail: String },
    #[error("integrity error at byte offset {offset}: {detail}")]
    Integrity { offset: u64, detail: String },
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("non-finite loss at step {step} (lr {lr:e})")]
    NonFiniteLoss { step: usize, lr: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable short name used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(TensorError::Dimension { .. }) => "dimension",
            Error::Tensor(TensorError::NonFinite { .. }) => "non_finite",
            Error::Tensor(TensorError::NumericGuard { .. }) => "numeric_guard",
            Error::Tensor(TensorError::Contract(_)) => "contract",
            Error::Config(_) => "config",
            Error::Index(_) => "index",
            Error::Geometry(_) => "geometry",
            Error::Compatibility { .. } => "compatibility",
            Error::Integrity { .. } => "integrity",
            Error::Version { .. } => "version",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
