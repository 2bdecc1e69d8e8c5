//! Reverse-mode automatic differentiation with support for differentiating
//! through recorded gradients.

pub mod check;
mod graph;
mod tensor;

pub use graph::{AdError, Graph, NodeId, Op};
pub(crate) use graph::sigmoid;
pub use tensor::{mem, Tensor};
