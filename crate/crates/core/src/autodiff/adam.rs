//! Adam with decoupled weight decay.
//!
//! The decay term `p ← p − lr·wd·p` is applied to the parameter directly and
//! never enters the moment estimates.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update over `params`, consuming each tensor's `grad`.
    ///
    /// Parameters without a gradient are still decayed. On a non-finite
    /// gradient nothing is modified and the step counter does not advance.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        let cfg = self.config;
        if !(cfg.learning_rate > 0.0) {
            return Err(Error::Contract(format!(
                "learning rate must be positive, got {}",
                cfg.learning_rate
            )));
        }
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.second_moment = self.first_moment.clone();
        }
        if self.first_moment.len() != params.len()
            || params.iter().zip(&self.first_moment).any(|(p, m)| p.numel() != m.len())
        {
            return Err(Error::Contract("parameter set changed between Adam steps".into()));
        }
        for (idx, p) in params.iter().enumerate() {
            if let Some(g) = &p.grad {
                if g.len() != p.numel() {
                    return Err(Error::Dimension {
                        op: "adam_step",
                        lhs: p.shape().to_vec(),
                        rhs: vec![g.len()],
                    });
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::PoisonedStep {
                        param: format!("#{idx}"),
                    });
                }
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.learning_rate;
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = p.grad.take();
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= lr * cfg.weight_decay * data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
            }
        }
        Ok(())
    }
}
