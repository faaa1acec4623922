//! AdamW with a cosine learning-rate schedule.

use alloc::vec::Vec;

use crate::autograd::{Grads, ParamStore};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clip the global gradient norm to this value when set.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, weight_decay: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    first: Vec<Option<Matrix>>,
    second: Vec<Option<Matrix>>,
    steps: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        Self { config, first: alloc::vec![None; store.len()], second: alloc::vec![None; store.len()], steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update at learning rate `lr` to every trainable parameter
    /// that has a gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.steps += 1;
        let c = &self.config;
        let clip = match c.clip_norm {
            Some(max) => {
                let n = grads.global_norm();
                if n > max {
                    max / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let value = store.get_mut(id);
            let m = self.first[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            let v = self.second[id.0].get_or_insert_with(|| Matrix::zeros(g.rows(), g.cols()));
            for (((p, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gi = gi * clip;
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= lr * (mhat / (libm::sqrt(vhat) + c.eps) + c.weight_decay * *p);
            }
        }
    }
}

/// Cosine decay from `base` to zero over `total` steps (with linear warmup).
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (total - warmup).max(1) as f64;
    0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * progress.min(1.0)))
}
