//! Newton's method in the class-gradient subspace, gradient descent in its
//! complement, plus the diagnostics needed to check the low-rank curvature
//! picture of softmax classifiers on small problems.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod curvature;
pub mod data;
pub mod diagnostics;
pub mod error;
#[cfg(not(target_arch = "wasm32"))]
pub mod harness;
pub mod linalg;
pub mod model;
pub mod optimizers;

pub use error::{Error, Result};
