//! Minimal dense-tensor arithmetic with reverse-mode differentiation and the
//! Adam optimizer. 64-bit precision throughout; gradient correctness is
//! enforced by finite-difference checks rather than trusted by construction.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod optim;
pub mod tensor;

pub use error::{NumericsError, Result};
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, clip_global_norm, AdamState, ParameterSet};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    graph::sigmoid_scalar(x)
}
