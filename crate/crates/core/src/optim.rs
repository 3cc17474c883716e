//! AdamW with decoupled weight decay, global-norm clipping and a step learning-rate drop.

use serde::{Deserialize, Serialize};

use crate::param::ParamStore;
use crate::tensor::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients are rescaled so their global L2 norm is at most this; 0 disables.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new<T: Real>(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        Self {
            cfg,
            m: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm<T: Real>(store: &ParamStore<T>) -> f64 {
        store
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g.f64() * g.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// One update at learning rate `lr` from the gradients stored in `store`.
    /// Only matrices are decayed. Returns the gradient norm before clipping.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, lr: f64) -> f64 {
        let c = &self.cfg;
        let norm = Self::grad_norm(store);
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let decay = if p.value.rank() >= 2 { c.weight_decay } else { 0.0 };
            for i in 0..m.len() {
                let g = p.grad[i].f64() * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let w = p.value.data()[i].f64();
                p.value.data_mut()[i] = T::of(w - lr * (update + decay * w));
            }
        }
        norm
    }
}

/// Learning rate after `epoch` completed epochs: `lr`, multiplied by `factor` from `drop_epoch` on.
pub fn scheduled_lr(lr: f64, epoch: usize, drop_epoch: usize, factor: f64) -> f64 {
    if epoch >= drop_epoch {
        lr * factor
    } else {
        lr
    }
}
