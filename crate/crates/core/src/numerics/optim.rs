use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{invalid, Result};

/// Adam hyperparameters with a linear warmup of the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW-style) weight decay.
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub warmup_init_lr: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-7,
            warmup_steps: 2000,
            warmup_init_lr: 1e-7,
        }
    }
}

impl AdamConfig {
    /// Learning rate used by the 1-based step `step`.
    ///
    /// Rises linearly from `warmup_init_lr` (step 0) to `learning_rate`
    /// (step `warmup_steps`) and stays there.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            return self.learning_rate;
        }
        let frac = step as f64 / self.warmup_steps as f64;
        self.warmup_init_lr + (self.learning_rate - self.warmup_init_lr) * frac
    }
}

/// Bias-corrected Adam over every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        let v = store
            .ids()
            .map(|id| vec![0.0; store.get(id).numel()])
            .collect();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.config.lr_at(self.step + 1)
    }

    /// Applies one update from the accumulated gradients, then clears them.
    ///
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if !store.has_grads() {
            return Err(invalid!(
                "optimizer step without gradients; run backward first"
            ));
        }
        if store.len() != self.m.len() {
            return Err(invalid!(
                "optimizer tracks {} parameters but the store has {}",
                self.m.len(),
                store.len()
            ));
        }
        self.step += 1;
        let c = &self.config;
        let lr = c.lr_at(self.step);
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let t = store.get_mut(id);
            let Some(g) = t.take_grad() else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((p, &gi), mi), vi) in t.data_mut().iter_mut().zip(&g).zip(m).zip(v) {
                let gi = gi as f64;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let update = (mn / bc1) / ((vn / bc2).sqrt() + c.eps);
                let pv = *p as f64;
                *p = (pv - lr * (update + c.weight_decay * pv)) as f32;
            }
        }
        Ok(())
    }
}

/// Step budget and batching shared by both training stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub steps: u64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Seed of the batch sampler (and negative sampling where used).
    pub seed: u64,
    /// Log a progress line every this many steps (0 disables).
    pub log_every: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 256,
            adam: AdamConfig::default(),
            seed: 2024,
            log_every: 500,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(invalid!("batch_size must be >= 1"));
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.learning_rate.is_finite()) {
            return Err(invalid!("learning_rate must be > 0"));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(invalid!("adam betas must lie in [0, 1)"));
        }
        if [a.eps, a.weight_decay, a.warmup_init_lr]
            .iter()
            .any(|v| v.is_nan())
            || a.eps <= 0.0
            || a.weight_decay < 0.0
            || a.warmup_init_lr < 0.0
        {
            return Err(invalid!(
                "adam eps must be > 0; weight decay and warmup_init_lr >= 0"
            ));
        }
        Ok(())
    }
}

/// Draws mini-batches by walking shuffled passes over `0..n`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n == 0 {
            return Err(invalid!("nothing to sample from"));
        }
        let mut s = Self {
            order: (0..n).collect(),
            cursor: 0,
            rng: super::seeded_rng(seed),
        };
        s.order.shuffle(&mut s.rng);
        Ok(s)
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    pub fn rng(&mut self) -> &mut rand_chacha::ChaCha8Rng {
        &mut self.rng
    }
}
