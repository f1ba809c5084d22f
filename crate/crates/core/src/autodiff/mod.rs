//! Tensor values, a reverse-mode graph over them, and the Adam optimizer.

mod adam;
mod graph;
mod kernels;
mod tensor;

pub use adam::{clip_global_norm, AdamConfig, AdamState};
pub use graph::{broadcast_shapes, sigmoid, softplus, Gradients, Graph, Var};
pub use tensor::Tensor;
