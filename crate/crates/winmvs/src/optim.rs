//! First-order adaptive-moment optimizer and the step-decay schedule.

use crate::grid::ValueGrid;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Moment buffers are aligned
/// with the parameter store positionally.
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let m = store.ids().map(|id| vec![0.0; store.grid(id).len()]).collect();
        let v = store.ids().map(|id| vec![0.0; store.grid(id).len()]).collect();
        Adam { cfg, m, v, t: 0 }
    }

    /// One update. `grads[i]` is the gradient for the i-th store entry;
    /// `None` leaves the entry untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ValueGrid>], lr: f64) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let data = store.grid_mut(id).data_mut();
            for ((p, g), (ms, vs)) in data
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *ms = b1 * *ms + (1.0 - b1) * g;
                *vs = b2 * *vs + (1.0 - b2) * g * g;
                let m_hat = *ms / bc1;
                let v_hat = *vs / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Step-decay learning-rate schedule: the rate is multiplied by `factor`
/// each time training passes one of the `milestones` (fractions of the
/// total step budget).
#[derive(Clone, Debug)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub factor: f64,
    pub milestones: Vec<f64>,
}

impl LrSchedule {
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let progress = if total_steps == 0 {
            0.0
        } else {
            step as f64 / total_steps as f64
        };
        let passed = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}
