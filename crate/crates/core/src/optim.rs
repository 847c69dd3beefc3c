//! AdamW with decoupled weight decay, and a linear-warmup cosine schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// Optimizer state: first and second moments per parameter, in store order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(cfg: AdamWConfig, ps: &ParamStore<T>) -> Self {
        let zeros = || ps.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` from the gradients stored in `ps`.
    /// Parameters without a gradient still decay.
    pub fn step<T: Real>(&mut self, ps: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != ps.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer built for {} parameters, store has {}",
                self.m.len(),
                ps.len()
            )));
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for ((p, m), v) in ps.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.tensor.grad.take();
            let data = p.tensor.data_mut();
            for (i, w) in data.iter_mut().enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64().unwrap());
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                let x = w.to_f64().unwrap() * decay - lr * update;
                *w = T::from_f64(x).unwrap();
            }
        }
        Ok(())
    }
}

/// Learning rate at zero-based `step`: `lr_init * (step + 1) / warmup` during
/// warmup, then cosine decay from `lr_init` to `lr_min` at `total`.
pub fn warmup_cosine(step: usize, warmup: usize, total: usize, lr_init: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr_init * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * t).cos())
}
