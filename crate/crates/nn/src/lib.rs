//! Minimal NCHW tensor library with a tape-based reverse-mode autodiff,
//! convolution layers, the Adam optimizer and a safetensors checkpoint
//! container.
//!
//! Everything runs on the CPU in `f32`. Matrix products go through
//! `matrixmultiply::sgemm`; no operation spawns threads, so results are
//! bit-reproducible for a given sequence of calls.

mod checkpoint;
mod conv;
mod error;
mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use error::NnError;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use layers::{Activation, Conv2d, Linear};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
