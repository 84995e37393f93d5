//! AdamW with decoupled weight decay.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::math;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    #[serde(default)]
    pub clip_norm: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.0 }
    }
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, ps: &ParamStore) -> Self {
        let m = ps.ids().map(|id| vec![0.0; ps.get(id).numel()]).collect::<Vec<_>>();
        Self { cfg, step: 0, v: m.clone(), m }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every unfrozen parameter bound on `tape`.
    /// Decay is applied only to tensors with two or more dimensions.
    pub fn step(&mut self, ps: &mut ParamStore, tape: &Tape, grads: &Gradients) {
        self.step += 1;
        let c = &self.cfg;
        let bound: Vec<_> = tape
            .bound_params()
            .filter(|(id, _)| !ps.is_frozen(*id))
            .filter_map(|(id, v)| grads.get(v).map(|g| (id, g)))
            .collect();
        let mut clip = 1.0;
        if c.clip_norm > 0.0 {
            let norm = math::sqrt(bound.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum());
            if norm > c.clip_norm {
                clip = c.clip_norm / norm;
            }
        }
        let b1t = 1.0 - math::powi(c.beta1, self.step as i32);
        let b2t = 1.0 - math::powi(c.beta2, self.step as i32);
        for (id, g) in bound {
            let decay = ps.get(id).ndim() >= 2 && c.weight_decay > 0.0;
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let w = ps.get_mut(id).data_mut();
            for i in 0..w.len() {
                let gi = g[i] * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                if decay {
                    w[i] -= c.lr * c.weight_decay * w[i];
                }
                w[i] -= c.lr * mhat / (math::sqrt(vhat) + c.eps);
            }
        }
    }
}
