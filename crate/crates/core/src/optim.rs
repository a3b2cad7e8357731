//! Adam with L2 weight decay folded into the gradient.

use serde::{Deserialize, Serialize};

use crate::tensor::Parameter;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled (L2) decay: `g ← g + weight_decay·θ` before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates, one buffer per parameter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Parameters without a gradient are
/// treated as having a zero data gradient (weight decay still applies).
pub fn adam_step(params: &mut [Parameter], state: &mut AdamState, cfg: &AdamConfig) {
    if state.m.len() != params.len() {
        state.m = params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        state.v = state.m.clone();
        state.step = 0;
    }
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grad = p.tensor.grad().map(<[f64]>::to_vec);
        let data = p.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad.as_ref().map_or(0.0, |g| g[i]) + cfg.weight_decay * data[i];
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            data[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
