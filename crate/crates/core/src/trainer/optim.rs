//! AdamW with linear warmup followed by linear decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, warmup_fraction: 0.1 }
    }
}

/// Learning-rate multiplier for 0-based `step` out of `total` steps.
pub fn schedule(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    let warmup = ((total as f64 * warmup_fraction).ceil() as usize).min(total);
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total > warmup {
        (total - step).max(0) as f64 / (total - warmup) as f64
    } else {
        1.0
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub total_steps: usize,
    step: usize,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, total_steps: usize) -> Self {
        Self { config, total_steps, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.config.learning_rate * schedule(self.step, self.total_steps, self.config.warmup_fraction)
    }

    /// Update one named parameter tensor. Call for every tensor, then [`AdamW::finish_step`].
    pub fn update(&mut self, name: &str, param: &mut [f64], grad: &[f64]) {
        let c = &self.config;
        let lr = self.current_lr();
        let t = (self.step + 1) as i32;
        let (bc1, bc2) = (1.0 - c.beta1.powi(t), 1.0 - c.beta2.powi(t));
        let (m, v) = self
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; param.len()], vec![0.0; param.len()]));
        for i in 0..param.len() {
            let g = grad[i];
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            param[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * param[i]);
        }
    }

    pub fn finish_step(&mut self) {
        self.step += 1;
    }
}
