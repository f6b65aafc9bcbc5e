//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] consumes the tape and returns the gradient of a chosen
//! output with respect to every node that transitively depends on a leaf
//! marked as requiring gradients. Leaves may be parameters or inputs, so the
//! same machinery yields parameter gradients for training and input
//! gradients for Langevin drift.

mod adam;
mod kernels;
mod tape;

pub use adam::{AdamConfig, ParameterStore, Slot};
pub use kernels::logsumexp;
pub use tape::{Gradients, Tape, Var};
