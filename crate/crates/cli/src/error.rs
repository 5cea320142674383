use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact {path}: run `{stage}` first")]
    Missing { path: PathBuf, stage: &'static str },
    #[error(transparent)]
    Core(#[from] yolco_core::Error),
    #[error(transparent)]
    Tensor(#[from] yolco_autograd::TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    /// Process exit status: 2 for bad configuration, 3 for a missing upstream
    /// artifact, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Missing { .. } => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}
