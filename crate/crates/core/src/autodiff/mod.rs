//! Dense `f64` tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
pub(crate) use tensor::kernels;
