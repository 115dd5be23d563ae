//! Adam with decoupled weight decay, plus the learning-rate schedules
//! used by the training loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Optimizer hyper-parameters shared across all parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moment estimates and step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(numel: usize) -> Self {
        AdamState { m: vec![0.0; numel], v: vec![0.0; numel], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }
}

/// One bias-corrected Adam update at learning rate `lr`. Weight decay is
/// decoupled: `param <- param * (1 - lr * wd)` before the Adam delta.
pub fn adam_step(
    param: &mut Tensor,
    grad: &[f64],
    state: &mut AdamState,
    hp: &AdamHyper,
    lr: f64,
) -> Result<()> {
    if grad.len() != param.numel() || state.m.len() != param.numel() {
        return Err(Error::invalid_argument(format!(
            "adam_step shape mismatch: param {}, grad {}, state {}",
            param.numel(),
            grad.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as f64;
    let bc1 = 1.0 - hp.beta1.powf(t);
    let bc2 = 1.0 - hp.beta2.powf(t);
    let decay = 1.0 - lr * hp.weight_decay;
    for ((p, &g), (m, v)) in param
        .data_mut()
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
        *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p = *p * decay - lr * m_hat / (v_hat.sqrt() + hp.eps);
    }
    Ok(())
}

/// Learning-rate schedule shape.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    /// Linear ramp over the warmup steps, then flat at the base rate.
    LinearWarmupConstant,
    /// Linear ramp over the warmup steps, then base * sqrt(warmup/step).
    InverseSqrt,
}

/// Learning rate at 1-based `step`.
pub fn lr_at(kind: ScheduleKind, base_lr: f64, warmup: u64, step: u64) -> f64 {
    debug_assert!(step >= 1);
    let s = step as f64;
    let w = warmup as f64;
    let factor = match kind {
        ScheduleKind::LinearWarmupConstant => {
            if warmup == 0 {
                1.0
            } else {
                (s / w).min(1.0)
            }
        }
        ScheduleKind::InverseSqrt => {
            if warmup == 0 {
                (1.0 / s).sqrt()
            } else {
                (s / w).min((w / s).sqrt())
            }
        }
    };
    base_lr * factor
}
