//! Dense tensors and reverse-mode differentiation for the operations the
//! regressors need.

mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_scaled, relative_error, relative_error_floored, GradCheckReport, DEFAULT_STEP};
pub use tape::{Backward, Gradients, Tape, Var};
pub use tensor::Tensor;
