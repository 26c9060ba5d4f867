//! SGD and Nadam.

use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Nadam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn nadam(learning_rate: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Nadam,
            ..Self::sgd(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        // Zero is accepted so that a schedule can be run as a no-op.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} is invalid", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("Nadam betas must lie in [0,1) and epsilon > 0".into()));
        }
        Ok(())
    }
}

/// Optimizer state, indexed by flat parameter position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub steps: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update to every trainable parameter using its accumulated gradient.
    pub fn step(&mut self, net: &mut Network<T>) {
        let n = net.param_count();
        if self.config.kind == OptimizerKind::Nadam && self.m.len() != n {
            self.m = vec![T::zero(); n];
            self.v = vec![T::zero(); n];
        }
        self.steps += 1;
        let lr = T::lit(self.config.learning_rate);
        match self.config.kind {
            OptimizerKind::Sgd => net.update_trainable(|_, w, g| *w = *w - lr * g),
            OptimizerKind::Nadam => {
                let (b1, b2) = (self.config.beta1, self.config.beta2);
                let t = self.steps as i32;
                let c1 = T::lit(1.0 - b1.powi(t));
                let c1_next = T::lit(1.0 - b1.powi(t + 1));
                let c2 = T::lit(1.0 - b2.powi(t));
                let (b1, b2) = (T::lit(b1), T::lit(b2));
                let eps = T::lit(self.config.epsilon);
                let (m, v) = (&mut self.m, &mut self.v);
                net.update_trainable(|i, w, g| {
                    m[i] = b1 * m[i] + (T::one() - b1) * g;
                    v[i] = b2 * v[i] + (T::one() - b2) * g * g;
                    let m_hat = b1 * m[i] / c1_next + (T::one() - b1) * g / c1;
                    let v_hat = v[i] / c2;
                    *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                });
            }
        }
    }
}
