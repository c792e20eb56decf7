use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// SGD with classical momentum; weight decay is folded into the gradient.
/// Momentum buffers are keyed by a caller-chosen slot id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SgdState {
    pub config: SgdConfig,
    buffers: BTreeMap<usize, Vec<f64>>,
}

impl SgdState {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            buffers: BTreeMap::new(),
        }
    }

    pub fn reset(&mut self) {
        self.buffers.clear();
    }

    pub fn step(&mut self, slot: usize, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape("sgd_step", param.shape(), grad.shape()));
        }
        let buf = self
            .buffers
            .entry(slot)
            .or_insert_with(|| vec![0.0; param.len()]);
        if buf.len() != param.len() {
            return Err(Error::shape("sgd_step", &[buf.len()], param.shape()));
        }
        sgd_step(param.data_mut(), grad.data(), buf, &self.config);
        Ok(())
    }
}

/// `g' = g + wd*p; buf = mu*buf + g'; p -= lr*buf`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], buf: &mut [f64], cfg: &SgdConfig) {
    for ((p, &g), b) in params.iter_mut().zip(grads).zip(buf.iter_mut()) {
        let g = g + cfg.weight_decay * *p;
        *b = cfg.momentum * *b + g;
        *p -= cfg.lr * *b;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub u: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            u: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape("adam_step", &[params.len()], &[grads.len()]));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.u[i] = cfg.beta2 * state.u[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let u_hat = state.u[i] / c2;
        params[i] -= cfg.lr * m_hat / (u_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
