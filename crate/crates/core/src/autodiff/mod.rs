//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check_finite_diff;
pub use tape::{eval_and_grad, Gradients, Tape, Var};
pub use tensor::Tensor;
