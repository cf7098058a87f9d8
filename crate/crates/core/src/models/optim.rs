use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::autodiff::{Gradients, Tensor};
use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Gradient norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
            clip_norm: 5.0,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &ParamStore) -> Self {
        let velocity = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { config, velocity }
    }

    /// Applies one update at learning rate `lr`; returns the pre-clip
    /// gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<f64> {
        let norm = grads.params().map(|(_, g)| g.norm_sq()).sum::<f64>().sqrt();
        ensure!(norm.is_finite(), InvalidArgument, "non-finite gradient norm");
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let mut seen = vec![false; params.len()];
        for (id, g) in grads.params() {
            seen[id] = true;
            self.update(params, id, Some(g), clip, lr);
        }
        // decay and momentum still act on parameters that got no gradient this step
        for (id, s) in seen.iter().enumerate() {
            if !s {
                self.update(params, id, None, clip, lr);
            }
        }
        Ok(norm)
    }

    fn update(&mut self, params: &mut ParamStore, id: usize, g: Option<&Tensor>, clip: f64, lr: f64) {
        let c = &self.config;
        let w = params.get_mut(id);
        let v = &mut self.velocity[id];
        for i in 0..w.len() {
            let grad = g.map_or(0.0, |g| g.data()[i] * clip) + c.weight_decay * w.data()[i];
            let vi = c.momentum * v.data()[i] + grad;
            v.data_mut()[i] = vi;
            w.data_mut()[i] -= lr * vi;
        }
    }
}

/// Cosine decay from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}
