//! A desk-scale laboratory for bias in actively sampled risk estimation.
//!
//! The crate trains depth uncertainty networks (DUNs) and Monte Carlo
//! dropout (MCDO) baselines on small regression datasets, acquires points
//! with a temperature-relaxed BALD proposal, and measures what active
//! sampling and overfitting do to risk estimates — including the
//! importance-weighted estimator that removes active learning bias.
//!
//! Layers, bottom up:
//!
//! * [`numerics`] — reverse-mode autodiff over dense f64 tensors, plus SGD.
//! * [`network`] — residual fully-connected stacks with per-depth outputs.
//! * [`dun`] — exact categorical inference over depth, variational training.
//! * [`mcdo`] — dropout-at-prediction baseline.
//! * [`estimators`] — risk estimators, reweighting, bias and variance probes.
//! * [`acquisition`] — BALD scores and sequential softmax sampling.
//! * [`data`] — dataset ingestion, splits, standardization, pool state.
//! * [`harness`] — the experiment suites, seeded and repeated.
//! * [`cli`] — config-driven command line over the harness plus SVG plots.
//!
//! Start with the runnable programs in `examples/`; each demonstrates one
//! capability end to end.

pub mod error;
pub mod network;
pub mod numerics;

pub use error::{Error, Result};
