//! Decoupled-weight-decay adaptive-moment optimizer (AdamW).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimizer schedule shared by all heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Stop after this many consecutive epochs without validation
    /// improvement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop_patience: Option<u32>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            epochs: 30,
            batch_size: 32,
            lr: 1e-2,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            early_stop_patience: Some(10),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.lr < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid("lr and weight_decay must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// AdamW state over a flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamW {
    pub fn new(param_len: usize, config: &OptimizerConfig) -> Self {
        AdamW {
            m: vec![0.0; param_len],
            v: vec![0.0; param_len],
            step: 0,
            lr: config.lr,
            weight_decay: config.weight_decay,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
        }
    }

    /// One update: Adam moments with bias correction, then decoupled weight
    /// decay. With `lr == 0` parameters are untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -=
                self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}
