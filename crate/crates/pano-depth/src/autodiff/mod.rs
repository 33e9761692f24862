//! Reverse-mode automatic differentiation over the operator set used by the
//! warps, losses, and the non-local block.
//!
//! A [`Tape`] records forward operations on [`Tensor`](crate::tensor::Tensor)
//! values; [`Tape::backward`] walks the recording in reverse and accumulates
//! gradients for every leaf created with `requires_grad = true`. Tapes are
//! cheap to build and are rebuilt from scratch every optimizer step.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, op_suite, GradCheckReport, OpCheck};
pub(crate) use kernels::{gather_forward, splat_forward};
pub use tape::{Gradients, Tape, Var, SMOOTH_ABS_EPS};
