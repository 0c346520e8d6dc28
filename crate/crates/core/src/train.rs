//! Optimizer settings and helpers shared by both training stages.

use hsisr_nn::AdamConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to `lr_min` over `steps`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub lr_min: f32,
    pub schedule: LrSchedule,
    pub beta1: f32,
    pub beta2: f32,
    pub clip_norm: Option<f32>,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            lr: 1e-4,
            lr_min: 0.0,
            schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            clip_norm: None,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr_min >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rates must be finite and >= 0, got {} / {}", self.lr, self.lr_min)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: 1e-8, clip_norm: self.clip_norm }
    }

    pub fn lr_at(&self, step: usize) -> f32 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => {
                let t = (step as f64 / self.steps.max(1) as f64).min(1.0);
                let c = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
                (self.lr_min as f64 + (self.lr - self.lr_min) as f64 * c) as f32
            }
        }
    }

    /// RNG for step `step`; depends only on the seed and the step index so a
    /// resumed run draws the same batches.
    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        seeded(self.seed, &format!("step-{step}"))
    }
}

/// Independent named stream derived from a base seed.
pub fn seeded(seed: u64, stream: &str) -> ChaCha8Rng {
    // FNV-1a over the stream name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}
