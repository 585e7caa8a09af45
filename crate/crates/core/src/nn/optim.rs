use std::f64::consts::PI;

use super::ParamSet;

/// SGD with heavy-ball momentum: `v <- m v + g`, `w <- w - lr v`.
pub fn sgd_step(params: &mut ParamSet, lr: f64, momentum: f64) {
    debug_assert!(lr >= 0.0 && (0.0..1.0).contains(&momentum));
    for (_, p) in params.iter_mut() {
        let v = p.momentum.data_mut();
        let g = p.grad.data();
        let w = p.value.data_mut();
        for ((v, &g), w) in v.iter_mut().zip(g).zip(w.iter_mut()) {
            *v = momentum * *v + g;
            *w -= lr * *v;
        }
    }
}

/// Cosine decay from `base_lr` at step 0 to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps: total_steps.max(1),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = (step.min(self.total_steps)) as f64 / self.total_steps as f64;
        0.5 * self.base_lr * (1.0 + (PI * t).cos())
    }
}
