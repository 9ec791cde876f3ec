use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Scales the step of every weight with a known fan-in by `sqrt(2 / fan_in)`,
    /// which is plain Adam on weights stored as `w / sqrt(2 / fan_in)`.
    pub equalized_lr: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            equalized_lr: true,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                problems.push(format!("adam {name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            problems.push(format!("adam eps must be positive, got {}", self.eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems))
        }
    }
}

/// First and second moments for every parameter of one [`ParamStore`], in store order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|p| Tensor::zeros(p.tensor.shape()))
            .collect();
        AdamState {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update with step size `lr · lr_multiplier` per parameter,
    /// times the fan-in factor when `equalized_lr` is on.
    /// Fails without touching anything if any gradient is not finite.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::argument(
                "adam_step",
                format!("lr must be positive, got {lr}"),
            ));
        }
        if self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        if let Some(p) = store.iter().find(|p| !p.gradient.is_finite()) {
            return Err(Error::NonFiniteGradient {
                name: p.name.clone(),
            });
        }
        let AdamConfig {
            beta1,
            beta2,
            eps,
            equalized_lr,
        } = self.config;
        self.t += 1;
        let t = i32::try_from(self.t).unwrap_or(i32::MAX);
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let scale = match (equalized_lr, p.fan_in) {
                (true, Some(n)) => (2.0 / n as f64).sqrt(),
                _ => 1.0,
            };
            let mult = p.lr_multiplier;
            let g = p.gradient.data();
            let values = p.tensor.data_mut();
            for (((x, &g), m), v) in values.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * scale * (m_hat / (v_hat.sqrt() + eps)) * mult;
            }
        }
        Ok(())
    }
}
