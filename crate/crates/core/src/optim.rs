//! AdamW, cosine learning-rate annealing and global gradient-norm clipping.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam with decoupled weight decay. Parameters without a gradient are left
/// untouched, including by the decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let sizes: Vec<usize> = store.ids().map(|id| store.tensor(id).len()).collect();
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update with learning rate `lr` from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("adamw", "parameter store changed since construction"));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powf(self.step as f64);
        let bc2 = 1.0 - beta2.powf(self.step as f64);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let t = store.tensor_mut(id);
            let Some(g) = t.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + eps);
                *p -= lr * (update + weight_decay * *p);
            }
        }
        Ok(())
    }
}

/// `lr_min + (lr_max - lr_min)(1 + cos(π s / (S - 1))) / 2`: `lr_max` at the
/// first step and `lr_min` at the last.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps <= 1 {
        return lr_max;
    }
    let frac = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .ids()
        .filter_map(|id| store.tensor(id).grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if let Some(g) = store.tensor_mut(id).grad_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
