//! Bias-corrected adaptive-moment optimizer.

use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        OptimizerState {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// First-moment estimates, in parameter order.
    pub fn first_moment(&self) -> &[Tensor] {
        &self.first_moment
    }
}

/// One in-place update; increments the step counter.
pub fn adam_step(params: &mut ParamSet, grads: &ParamSet, state: &mut OptimizerState) -> Result<()> {
    if params.tensors.len() != grads.tensors.len()
        || params.tensors.len() != state.first_moment.len()
    {
        return Err(Error::config("adam: mismatched parameter/gradient sets"));
    }
    let cfg = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.tensors.len() {
        let g = grads.tensors[i].1.data();
        let p = &mut params.tensors[i].1;
        if p.numel() != g.len() {
            return Err(Error::config(format!(
                "adam: shape mismatch on tensor {}",
                params.tensors[i].0
            )));
        }
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        let pd = p.data_mut();
        for j in 0..g.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            pd[j] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}
