//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod kernels;

pub use gradcheck::finite_difference_check;
pub use graph::{Gradients, Graph, Op, OpAttrs, Var};
