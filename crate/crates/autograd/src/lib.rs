//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The engine records a dynamic graph of [`Var`] operations. Backward rules
//! are expressed with the same differentiable ops, so gradients can be
//! differentiated again (double backpropagation), which input-gradient
//! regularizers need.

mod conv;
mod ops;
mod tensor;
mod var;

pub use conv::{conv2d_input_grad, conv2d_weight_grad};
pub use tensor::{broadcast_shape, Tensor};
pub use var::{grad, grad_with_seed, is_grad_enabled, no_grad, BackwardCtx, Function, GradModeGuard, Var};
