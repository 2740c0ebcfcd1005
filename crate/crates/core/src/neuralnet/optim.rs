use serde::{Deserialize, Serialize};

use crate::error::{PhaseError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Adam,
    RmsProp,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const RMSPROP_RHO: f64 = 0.9;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RmsPropState {
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum OptimizerState {
    Adam(AdamState),
    RmsProp(RmsPropState),
    Sgd,
}

impl OptimizerState {
    pub fn new(kind: Optimizer) -> Self {
        match kind {
            Optimizer::Adam => OptimizerState::Adam(AdamState::default()),
            Optimizer::RmsProp => OptimizerState::RmsProp(RmsPropState::default()),
            Optimizer::Sgd => OptimizerState::Sgd,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        match self {
            OptimizerState::Adam(s) => adam_step(params, grads, s, lr),
            OptimizerState::RmsProp(s) => rmsprop_step(params, grads, s, lr),
            OptimizerState::Sgd => sgd_step(params, grads, lr),
        }
    }
}

fn check(params: &[f64], grads: &[f64]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(PhaseError::shape("gradient", params.len(), grads.len()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(PhaseError::Numeric(format!("gradient {i} is not finite")));
    }
    Ok(())
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    check(params, grads)?;
    if state.m.len() != params.len() {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
        state.step = 0;
    }
    state.step += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
    }
    Ok(())
}

pub fn rmsprop_step(params: &mut [f64], grads: &[f64], state: &mut RmsPropState, lr: f64) -> Result<()> {
    check(params, grads)?;
    if state.v.len() != params.len() {
        state.v = vec![0.0; params.len()];
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut state.v) {
        *v = RMSPROP_RHO * *v + (1.0 - RMSPROP_RHO) * g * g;
        *p -= lr * g / (v.sqrt() + EPSILON);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check(params, grads)?;
    for (p, &g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}
