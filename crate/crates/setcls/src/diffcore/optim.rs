//! Parameter update rules: adaptive moments (default) and SGD with momentum.

use super::{ParamSet, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Only used by `Sgd`.
    pub momentum: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
pub struct Optimizer {
    config: OptimizerConfig,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamSet) -> Self {
        let first_moment = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        let second_moment =
            params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Optimizer { config, first_moment, second_moment, step_count: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Applies one update from the gradients currently held in `params`.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Invalid("optimizer state does not match parameter set".into()));
        }
        self.step_count += 1;
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
                let bias1 = 1.0 - b1.powi(self.step_count as i32);
                let bias2 = 1.0 - b2.powi(self.step_count as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let m = self.first_moment[i].data_mut();
                    let v = self.second_moment[i].data_mut();
                    let g = p.grad.data();
                    for j in 0..g.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let mhat = m[j] / bias1;
                        let vhat = v[j] / bias2;
                        p.value.data_mut()[j] -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Sgd => {
                let mu = self.config.momentum;
                for (i, p) in params.iter_mut().enumerate() {
                    let m = self.first_moment[i].data_mut();
                    let g = p.grad.data();
                    for j in 0..g.len() {
                        m[j] = mu * m[j] + g[j];
                        p.value.data_mut()[j] -= lr * m[j];
                    }
                }
            }
        }
        Ok(())
    }
}
