//! SGD with momentum and the learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};

/// Half-cosine from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    let t = step.min(total_steps) as f64 / total_steps.max(1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t).cos())
}

/// Backbone learning-rate factor during fine-tuning warm-up.
pub fn backbone_lr_multiplier(epoch: usize, warmup_epochs: usize, multiplier: f64) -> f64 {
    if epoch < warmup_epochs {
        multiplier
    } else {
        1.0
    }
}

/// Single ×0.1 step once `epoch` (0-based) reaches 80% of training.
pub fn step_decay(epoch: usize, total_epochs: usize) -> f64 {
    if epoch >= total_epochs * 4 / 5 {
        0.1
    } else {
        1.0
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    pub fn buffer(&self, name: &str) -> Option<&[f32]> {
        self.buffers.get(name).map(Vec::as_slice)
    }

    /// `v ← μ·v + g + λ·θ; θ ← θ − lr·v` for every trainable parameter.
    /// `lr_of` maps a parameter name to its learning rate.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f32>)], lr_of: impl Fn(&str) -> f64) -> Result<()> {
        let mut by_id: Vec<Option<&[f32]>> = vec![None; store.len()];
        for (id, g) in grads {
            by_id[id.index()] = Some(g);
        }
        let ids: Vec<ParamId> = store.iter().filter(|(_, _, p)| p.trainable()).map(|(id, _, _)| id).collect();
        for id in ids {
            let name = store.name(id).to_string();
            let g = by_id[id.index()].ok_or_else(|| Error::invalid(format!("no gradient for trainable parameter `{name}`")))?;
            let lr = lr_of(&name);
            let p = store.get_mut(id).tensor.data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("sgd_step", "grad", format!("`{name}`: {} values for {} parameters", g.len(), p.len())));
            }
            let v = self.buffers.entry(name).or_insert_with(|| vec![0.0; p.len()]);
            let (mu, wd) = (self.momentum as f32, self.weight_decay as f32);
            for i in 0..p.len() {
                v[i] = mu * v[i] + g[i] + wd * p[i];
                p[i] -= lr as f32 * v[i];
            }
        }
        Ok(())
    }
}
