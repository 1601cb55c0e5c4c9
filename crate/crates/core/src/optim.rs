//! AdamW with decoupled weight decay and the stepped learning-rate decay.

use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Matrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient for parameter {name}; step rejected")]
    NonFiniteGrad { name: String },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment accumulators, aligned with the parameter store.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store
            .entries()
            .iter()
            .map(|e| Matrix::zeros(e.value.dim()))
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// Stepped multiplicative decay: base * decay^floor(step / interval).
pub fn lr_schedule(step: u64, base: f64, decay: f64, interval: u64) -> f64 {
    assert!(interval > 0, "decay interval must be positive");
    base * decay.powi((step / interval) as i32)
}

/// One AdamW update over every parameter, with the learning rate chosen per
/// group. Missing gradients count as zero (decay still applies); any
/// non-finite gradient rejects the whole step before touching state.
pub fn adamw_step(
    store: &mut ParamStore,
    state: &mut AdamState,
    lr_encoder: f64,
    lr_decoder: f64,
    cfg: &AdamConfig,
) -> Result<(), OptimError> {
    for e in store.entries() {
        if let Some(g) = &e.grad {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(OptimError::NonFiniteGrad {
                    name: e.name.clone(),
                });
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, e) in store.entries_mut().iter_mut().enumerate() {
        let lr = match e.group {
            ParamGroup::Encoder => lr_encoder,
            ParamGroup::Decoder => lr_decoder,
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let value = e.value.as_slice_mut().expect("contiguous");
        let m = m.as_slice_mut().expect("contiguous");
        let v = v.as_slice_mut().expect("contiguous");
        let zero = Matrix::zeros((1, 1));
        let grad: &[f64] = match &e.grad {
            Some(g) => g.as_slice().expect("contiguous"),
            None => zero.as_slice().unwrap(),
        };
        let has_grad = e.grad.is_some();
        for i in 0..value.len() {
            let g = if has_grad { grad[i] } else { 0.0 };
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let theta = value[i];
            value[i] = theta - lr * m_hat / (v_hat.sqrt() + cfg.eps) - lr * cfg.weight_decay * theta;
        }
    }
    Ok(())
}
