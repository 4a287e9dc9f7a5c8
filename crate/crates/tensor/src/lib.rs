//! Dense row-major `f64` tensors with a dynamic reverse-mode autodiff graph.
//!
//! Every op records a backward closure on its output when any input requires
//! a gradient. [`Tensor::backward`] walks the graph children-first and
//! accumulates gradients additively, so callers zero them between steps.

pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod param;
pub mod shape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, gradcheck_params, relative_error, DEFAULT_EPS};
pub use ops::elementwise::{elementwise, ElementOp};
pub use ops::reduce::{reduce, ReduceOp};
pub use param::Param;
pub use tensor::{grad_enabled, no_grad, NoGradGuard, Tensor};
