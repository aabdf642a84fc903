//! Tensors, attention and resampling kernels, reverse-mode autodiff and a
//! finite-difference gradient checker.

mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use gradcheck::{finite_diff_grad_check, DEFAULT_EPS};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{masked_attention, softmax_rows, trilinear_resample, PairMask};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod grad_tests;
