//! Dense CPU tensors with a reverse-mode gradient tape.
//!
//! Values are plain [`Tensor`]s; a [`Tape`] records operations on them and
//! [`Tape::backward`] replays the record in reverse. Parameters live in a
//! [`ParamStore`] and are bound onto a fresh tape for every forward pass.

mod checkpoint;
mod element;
mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, FORMAT_VERSION};
pub use element::{lit, Element};
pub use error::{Result, TensorError};
pub use optim::{cosine_lr, Adam, AdamConfig};
pub use params::{accumulate, Bound, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
