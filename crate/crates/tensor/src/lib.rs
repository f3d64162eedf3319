//! Minimal CPU tensor library with reverse-mode autodiff, sized for small
//! convolutional networks trained on one machine.

mod error;
mod float;
mod graph;
pub mod nn;
pub mod ops;
mod tensor;

pub use error::{Error, Result};
pub use float::{gemm, Float, Mat};
pub use graph::{BackwardCtx, BackwardOp, Grads, Graph, Var};
pub use tensor::Tensor;
