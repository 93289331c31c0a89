//! AdamW with a linear warmup / linear decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    /// Decoupled decay for generator weights. Gate logits never decay.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            warmup_ratio: 0.06,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let key = |k: &str| format!("{prefix}.{k}");
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(key("lr"), "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config(key("warmup_ratio"), "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config(key("weight_decay"), "must be non-negative"));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key(k), "must lie in [0, 1)"));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::config(key("eps"), "must be positive"));
        }
        Ok(())
    }
}

/// Piecewise-linear schedule: 0 → `base` over the warmup steps, then `base` → 0
/// at `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub base: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn new(base: f64, warmup_ratio: f64, total: usize) -> Self {
        let warmup = (warmup_ratio * total as f64).round() as usize;
        Self {
            base,
            warmup: warmup.min(total),
            total,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            self.base * step as f64 / self.warmup as f64
        } else if step >= self.total {
            0.0
        } else {
            self.base * (self.total - step) as f64 / (self.total - self.warmup) as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    schedule: LinearSchedule,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, weight_decay: f64, total_steps: usize, shapes: &[[usize; 2]]) -> Self {
        let zeros = || shapes.iter().map(|&[r, c]| Tensor::zeros(r, c)).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay,
            schedule: LinearSchedule::new(cfg.lr, cfg.warmup_ratio, total_steps),
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.step)
    }

    /// Applies one update and returns the learning rate used.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::dim(
                "adamw",
                format!("{} params / {} grads for {} slots", params.len(), grads.len(), self.m.len()),
            ));
        }
        let lr = self.schedule.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim("adamw", format!("slot {i}: {:?} vs {:?}", p.shape(), g.shape())));
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                if self.weight_decay != 0.0 {
                    *w -= lr * self.weight_decay * *w;
                }
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * update;
            }
        }
        Ok(lr)
    }
}
