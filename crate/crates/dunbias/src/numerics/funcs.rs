//! Stable scalar/vector numeric primitives shared across the crate.

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// max(v) + log Σ exp(v − max(v)). Finite for any finite input.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Param("log_sum_exp of empty vector".into()));
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite { op: "log_sum_exp" });
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    Ok(m + s.ln())
}

/// Shift-invariant softmax; outputs are strictly positive and sum to one.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Param("softmax of empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= s;
    }
    Ok(out)
}

/// Negative log density of N(mean, exp(log_var)) at y.
pub fn gaussian_nll(y: f64, mean: f64, log_var: f64) -> Result<f64> {
    if !(y.is_finite() && mean.is_finite() && log_var.is_finite()) {
        return Err(Error::NonFinite { op: "gaussian_nll" });
    }
    let diff = y - mean;
    Ok(0.5 * LN_2PI + 0.5 * log_var + diff * diff / (2.0 * log_var.exp()))
}

/// Log density counterpart of [`gaussian_nll`].
pub fn gaussian_log_density(y: f64, mean: f64, log_var: f64) -> f64 {
    let diff = y - mean;
    -0.5 * LN_2PI - 0.5 * log_var - diff * diff / (2.0 * log_var.exp())
}
