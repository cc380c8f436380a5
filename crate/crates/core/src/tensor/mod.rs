//! Dense tensors, a reverse-mode tape, and multiply-count instrumentation.

mod array;
mod float;
mod graph;

pub use array::Tensor;
pub use float::{DType, Float};
pub use graph::{Gradients, Graph, Padding, UnaryKind, Var};
