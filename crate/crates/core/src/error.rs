use std::io;

use yolco_autograd::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input to {what}: {reason}")]
    Invalid { what: &'static str, reason: String },
    #[error("{0} is undefined for this input")]
    Undefined(&'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid { what, reason: reason.into() }
}
