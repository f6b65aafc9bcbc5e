//! Differential-entropy estimation with a Gaussian-mixture base and a
//! learned Donsker–Varadhan correction.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod datasets;
pub mod dv;
pub mod error;
pub mod estimators;
pub mod gmm;
pub mod harness;
pub mod network;
pub mod persist;
pub mod rng;
pub mod samplers;
pub mod special;
pub mod stats;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
