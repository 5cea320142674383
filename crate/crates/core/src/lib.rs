//! Lightweight two-scale lesion detection and slide-level diagnosis.

pub mod classifier;
pub mod error;
pub mod features;
pub mod geometry;
pub mod incnet;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod wsi;

pub use error::{Error, Result};
