//! Stochastic gradient descent with heavy-ball momentum.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamSet;

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Optimizer state: `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    momentum: f64,
    velocity: HashMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be finite and nonnegative, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: HashMap::new(),
        })
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }
}

/// One update of every parameter from its populated `grad`.
///
/// All gradients are checked before anything is modified.
pub fn sgd_step(params: &mut ParamSet, state: &mut SgdState) -> Result<()> {
    for (name, t) in params.iter() {
        if t.grad().is_none() {
            return Err(Error::Contract(format!("parameter {name} has no gradient")));
        }
    }
    let (lr, mu) = (state.learning_rate, state.momentum);
    for (name, t) in params.iter_mut() {
        let g = t.grad().expect("checked above").to_vec();
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        if v.len() != g.len() {
            return Err(Error::Dimension(format!(
                "velocity for {name} has {} entries, parameter has {}",
                v.len(),
                g.len()
            )));
        }
        for ((w, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = mu * *vi + gi;
            *w -= lr * *vi;
        }
    }
    Ok(())
}
