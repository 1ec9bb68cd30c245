//! Full-batch SGD with momentum and additive L2 weight decay.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Momentum buffers plus hyperparameters. One state instance per model;
/// velocity shapes mirror the parameter list passed to [`sgd_step`].
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState { learning_rate, momentum, weight_decay, velocity: Vec::new() }
    }
}

/// v <- mu*v + (g + lambda*theta); theta <- theta - lr*v
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut OptimizerState,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Shape {
            op: "sgd_step",
            detail: format!("{} params vs {} grads", params.len(), grads.len()),
        });
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Shape { op: "sgd_step", detail: "velocity count".into() });
    }
    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if param.len() != grad.len() || param.len() != vel.len() {
            return Err(Error::Shape {
                op: "sgd_step",
                detail: format!("param {} vs grad {}", param.len(), grad.len()),
            });
        }
        let data = param.data_mut();
        for i in 0..data.len() {
            let g = grad[i] + state.weight_decay * data[i];
            vel[i] = state.momentum * vel[i] + g;
            data[i] -= state.learning_rate * vel[i];
        }
        param.check_finite("sgd_step")?;
    }
    Ok(())
}
