//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! Sufficient for residual MLPs with batch normalization, dropout and
//! Gaussian likelihoods; nothing more. Single-threaded within one tape;
//! tensors and tapes are sendable, parallelism happens one level up.

mod funcs;
mod sgd;
mod tape;
mod tensor;

pub use funcs::{gaussian_log_density, gaussian_nll, log_sum_exp, softmax, LN_2PI};
pub use sgd::{sgd_step, OptimizerState};
pub use tape::{BatchStats, Tape, Var};
pub use tensor::Tensor;
