//! Dense tensors with reverse-mode gradients for the handful of operations the
//! model uses, plus a finite-difference checker.

pub mod attention;
mod gradcheck;
mod tape;
mod tensor;

pub use attention::AttentionMode;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use tape::{gelu_scalar, normal_cdf, Gradients, Tape, Var};
pub use tensor::Tensor;
