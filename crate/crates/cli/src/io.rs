use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Fails with a missing-artifact error naming the stage that produces `path`.
pub fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing { path: path.to_path_buf(), stage })
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| CliError::Json { path: path.to_path_buf(), source })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| CliError::Json { path: path.to_path_buf(), source })?;
    write_text(path, &(text + "\n"))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path, stage: &'static str) -> Result<String> {
    require(path, stage)?;
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Creates `dir` and stores the resolved config in it as `config.json`.
pub fn stage_dir(dir: &Path, cfg: &RunConfig) -> Result<()> {
    ensure_dir(dir)?;
    write_text(&dir.join("config.json"), &cfg.to_json())
}
