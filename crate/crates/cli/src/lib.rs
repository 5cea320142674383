//! Reproducible driver for the detection-then-classification pipeline. Every stage
//! is a function here; the `yolco` binary maps subcommands onto them.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod io;

pub use config::{substream, Overrides, RunConfig};
pub use error::{CliError, Result};
