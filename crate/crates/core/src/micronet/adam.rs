use serde::{Deserialize, Serialize};

use super::tape::Mat;

/// Step decay: `base` until `decay_start`, then multiplied by `factor`
/// once at `decay_start` and again every `decay_every` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub decay_start: u64,
    pub decay_every: u64,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            decay_start: 50_000,
            decay_every: 10_000,
            factor: 0.9,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64, base_lr: f64) -> f64 {
        if step < self.decay_start {
            return base_lr;
        }
        let decays = (step - self.decay_start) / self.decay_every.max(1) + 1;
        base_lr * self.factor.powi(decays as i32)
    }
}

/// The default schedule at `step`.
pub fn lr_at(step: u64, base_lr: f64) -> f64 {
    LrSchedule::default().lr_at(step, base_lr)
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &[Mat]) -> Self {
        let zeros = || params.iter().map(|p| Mat::zeros(p.raw_dim())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected Adam update in place.
    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}
