//! Minimal reverse-mode differentiation engine, dense layers and Adam.

mod adam;
pub mod checkpoint;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::AdamState;
pub use graph::{Backward, Graph, Var, LOG_FLOOR};
pub use layers::{Dense, Mlp};
pub use params::{GradEntry, Gradients, ParamId, ParamStore};
pub use tensor::Tensor;
