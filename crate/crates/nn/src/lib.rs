//! Minimal dense-tensor kernel for the discriminator and segmenter.
//!
//! Values are `f64` throughout. A [`Graph`] records operations as they run
//! and replays them in reverse to produce gradients; parameters live outside
//! the graph in [`Parameter`] and are updated with [`adam_step`].

mod adam;
pub mod checkpoint;
mod error;
mod graph;
pub mod ops;
mod param;
mod tensor;

pub use adam::{adam_step, adam_update, Adam, AdamConfig, AdamState};
pub use error::NnError;
pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use param::Parameter;
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, NnError>;
