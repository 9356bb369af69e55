//! Dense-tensor arithmetic with reverse-mode differentiation.
//!
//! [`Tensor`] is an immutable shape + row-major buffer. [`Tape`] records a
//! topologically ordered graph of operations; [`Tape::backward`] walks it in
//! reverse, accumulating gradients additively. All ops verify output
//! finiteness; NaN/Inf anywhere is a hard error.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use scalar::Real;
pub use tape::{CostTag, MacCounter, Tape, Var};
pub use tensor::Tensor;
