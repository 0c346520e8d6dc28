use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{NnError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with learning rate `lr` (schedules are the caller's business).
    pub fn step_with_lr(&mut self, store: &mut ParamStore, grads: &[Tensor], lr: f32) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(NnError::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let clip = match self.config.clip_norm {
            Some(max) => {
                let norm = grads.iter().flat_map(|g| g.data()).map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if norm > max as f64 {
                    (max as f64 / norm) as f32
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for ((id, g), (m, v)) in store.ids().collect::<Vec<_>>().into_iter().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = store.value_mut(id);
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g * clip;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= step_size * *m / (v.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.step_with_lr(store, grads, self.config.lr)
    }

    /// Moment buffers as named tensors, for checkpointing.
    pub fn state(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (id, (m, v)) in store.ids().zip(self.m.iter().zip(&self.v)) {
            out.push((format!("adam.m.{}", store.name(id)), m.clone()));
            out.push((format!("adam.v.{}", store.name(id)), v.clone()));
        }
        out.push(("adam.step".into(), Tensor::full([1, 1, 1, 1], self.step as f32)));
        out
    }

    pub fn load_state<'a>(&mut self, store: &ParamStore, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (id, (m, v)) in store.ids().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let name = store.name(id);
            for (slot, prefix) in [(m, "adam.m."), (v, "adam.v.")] {
                let key = format!("{prefix}{name}");
                let t = lookup(&key).ok_or(NnError::UnknownParam(key))?;
                if t.shape() != slot.shape() {
                    return Err(NnError::Shape(format!("optimizer state for `{name}`")));
                }
                *slot = t.clone();
            }
        }
        let step = lookup("adam.step").ok_or_else(|| NnError::UnknownParam("adam.step".into()))?;
        self.step = step.data()[0] as u64;
        Ok(())
    }
}
