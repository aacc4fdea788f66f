use thiserror::Error;

/// Errors raised by tensor construction, forward ops and the optimizer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail} (shapes {lhs:?} and {rhs:?})")]
    Dimension {
        op: &'static str,
        detail: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("numeric guard in {op}: {detail}")]
    NumericGuard { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

impl TensorError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Dimension {
            op,
            detail: detail.into(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
