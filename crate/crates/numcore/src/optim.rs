use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter, plus the
/// shared step counter used for bias correction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update over every trainable parameter.
/// `grads` must be in parameter order (see [`ParamSet`]).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if cfg.lr <= 0.0 {
        return Err(NumError::OptimConfig(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(NumError::Contract(format!(
            "adam_step arity mismatch: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for (i, param) in params.iter_mut().enumerate() {
        if !param.trainable {
            continue;
        }
        if grads[i].shape() != param.tensor.shape() {
            return Err(NumError::ShapeMismatch {
                op: "adam_step",
                lhs: param.tensor.shape().to_vec(),
                rhs: grads[i].shape().to_vec(),
            });
        }
        let g = grads[i].values();
        let m = state.m[i].values_mut();
        let v = state.v[i].values_mut();
        let p = param.tensor.values_mut();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scale gradients in place so their global L2 norm does not exceed
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .map(|g| g.values().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.values_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
