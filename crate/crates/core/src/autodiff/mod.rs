//! Minimal reverse-mode differentiation over rank-4 tensors.
//!
//! Ops are recorded on a [`Tape`] as they execute; [`Tape::backward`] walks the
//! record in exact reverse order, accumulating each op's contribution into its
//! inputs and finally into the [`ParamStore`].

mod gradcheck;
mod kernels;
mod params;
mod tape;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{sigmoid, Activation, Gradients, Tape, Var};
