//! Adam with linear warmup and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates over which the learning rate ramps up linearly.
    pub warmup_steps: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 0,
            clip_norm: 5.0,
        }
    }
}

impl AdamConfig {
    /// Warmup over `fraction` of `total_steps`.
    pub fn with_warmup_fraction(mut self, total_steps: usize, fraction: f64) -> Self {
        self.warmup_steps = (total_steps as f64 * fraction).round() as usize;
        self
    }
}

pub struct Adam {
    pub config: AdamConfig,
    step: usize,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup_steps == 0 {
            c.lr
        } else {
            c.lr * ((self.step + 1) as f64 / c.warmup_steps as f64).min(1.0)
        }
    }

    /// Applies one update to every parameter that has a gradient. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> f64 {
        let norm = grads
            .values()
            .flat_map(|g| g.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let c = self.config.clone();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm {
            c.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, g) in grads {
            let Some(p) = params.get_mut(name) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi * clip;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
        norm
    }
}
