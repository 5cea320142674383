use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// `std::io::Error` is not `Clone`; keep the message.
#[derive(Debug, Error, Clone, PartialEq)]
#[error("{0}")]
pub struct IoError(pub String);

impl From<std::io::Error> for TensorError {
    fn from(e: std::io::Error) -> Self {
        TensorError::Io(IoError(e.to_string()))
    }
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, reason: reason.into() }
}

pub(crate) fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, expected: expected.to_vec(), got: got.to_vec() }
}
