//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation in creation order, so parents always
//! precede children and [`Tape::backward`] is a single reverse sweep. Values
//! handed out as [`Var`] are cheap copyable handles into the tape.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, REL_FLOOR};
pub use ops::DEFAULT_EPS;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
