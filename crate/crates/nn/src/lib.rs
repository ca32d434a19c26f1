//! Numeric side of the overpainting toolkit: a tape-based autodiff engine,
//! Adam, the transformer with its training loop, and nucleus sampling.

pub mod autodiff;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod sample;
pub mod train;

pub use autodiff::{Graph, Scalar, Tensor, Var};
pub use model::{Checkpoint, Model, ModelConfig};
pub use train::{TrainConfig, TrainOutcome};
