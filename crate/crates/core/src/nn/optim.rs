use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Float, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::RmsProp => "rmsprop",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Optimizer choice plus its coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSProp smoothing constant.
    pub alpha: f64,
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            alpha: 0.99,
            eps: 1e-8,
        }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn rmsprop(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::RmsProp, learning_rate)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// One update of a single parameter array at step `t` (1-based).
pub fn optimizer_step<T: Float>(
    config: &OptimizerConfig,
    t: u64,
    param: &mut [T],
    grad: &[T],
    moment1: &mut [T],
    moment2: &mut [T],
) {
    assert!(t >= 1, "optimizer steps are 1-based");
    let lr = T::of(config.learning_rate);
    let eps = T::of(config.eps);
    match config.kind {
        OptimizerKind::Adam => {
            let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
            let c1 = T::of(1.0 - config.beta1.powi(t as i32));
            let c2 = T::of(1.0 - config.beta2.powi(t as i32));
            for i in 0..param.len() {
                let g = grad[i];
                moment1[i] = b1 * moment1[i] + (T::one() - b1) * g;
                moment2[i] = b2 * moment2[i] + (T::one() - b2) * g * g;
                let m_hat = moment1[i] / c1;
                let v_hat = moment2[i] / c2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        OptimizerKind::RmsProp => {
            let a = T::of(config.alpha);
            for i in 0..param.len() {
                let g = grad[i];
                moment2[i] = a * moment2[i] + (T::one() - a) * g * g;
                param[i] -= lr * g / (moment2[i].sqrt() + eps);
            }
        }
    }
}

/// Applies the configured update rule to every trainable entry of a store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Number of updates applied so far.
    pub step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self { config, step: 0 }
    }

    /// Updates parameters from their accumulated gradients. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step<T: Float>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        for (_, e) in store.entries() {
            if e.trainable && e.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient(e.name.clone()));
            }
        }
        self.step += 1;
        for e in store.entries_mut().filter(|e| e.trainable) {
            optimizer_step(
                &self.config,
                self.step,
                e.value.data_mut(),
                &e.grad,
                &mut e.moment1,
                &mut e.moment2,
            );
        }
        Ok(())
    }
}
