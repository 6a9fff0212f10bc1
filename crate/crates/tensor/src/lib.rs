//! Dense `f64` tensors and a reverse-mode autodiff tape sized for small
//! vision models on the CPU.

pub mod check;
mod error;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{sigmoid, softmax_values, softplus, Graph, Var, COSINE_EPS};
pub use tensor::Tensor;
