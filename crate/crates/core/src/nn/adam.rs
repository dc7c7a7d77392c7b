use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::BnUpdate;
use super::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First/second moment estimates, one slot per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: vec![Vec::new(); store.len()],
            v: vec![Vec::new(); store.len()],
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(
        &mut self,
        cfg: &AdamConfig,
        store: &mut ParamStore,
        grads: &BTreeMap<ParamId, Vec<f64>>,
    ) {
        if self.m.len() < store.len() {
            self.m.resize(store.len(), Vec::new());
            self.v.resize(store.len(), Vec::new());
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (&id, g) in grads {
            if !store.is_trainable(id) {
                continue;
            }
            let i = id.index();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            if m.is_empty() {
                *m = vec![0.0; g.len()];
                *v = vec![0.0; g.len()];
            }
            let p = &mut store.get_mut(id).data;
            for j in 0..g.len() {
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
    }
}

/// Folds recorded batch statistics into the running estimates.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        for (r, b) in store.get_mut(u.mean).data.iter_mut().zip(&u.batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, b) in store.get_mut(u.var).data.iter_mut().zip(&u.batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}
