//! AdamW with decoupled weight decay.

use std::sync::Arc;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of steps taken so far (drives bias correction).
    pub t: u64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
        }
    }

    /// Apply one update. `grads` is indexed by parameter id; `None` entries
    /// are skipped entirely (no moment update, no decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (entry, grad) in store.entries_mut().iter_mut().zip(grads) {
            let Some(g) = grad else { continue };
            let value = Arc::make_mut(&mut entry.value);
            let m = &mut entry.m;
            let v = &mut entry.v;
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            for (((p, g), m), v) in value
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            }
        }
    }
}
