//! AdamW with linear warmup and linear decay.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Gradients, ParamId, ParamStore};
use mathmoe_tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to matrices only.
    pub weight_decay: f64,
    /// Fraction of the run spent warming the learning rate up from zero.
    pub warmup_fraction: f64,
    /// Decay linearly to zero after warmup; otherwise hold the peak rate.
    pub linear_decay: bool,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            linear_decay: true,
            clip_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_fraction);
        if ok {
            Ok(())
        } else {
            Err(CoreError::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: OptimizerConfig,
    total_steps: usize,
    step: usize,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, config: OptimizerConfig, total_steps: usize) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Ok(AdamW {
            config,
            total_steps: total_steps.max(1),
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let c = &self.config;
        let warmup = (c.warmup_fraction * self.total_steps as f64).ceil() as usize;
        if step < warmup {
            return c.lr * (step + 1) as f64 / warmup as f64;
        }
        if !c.linear_decay {
            return c.lr;
        }
        let remaining = self.total_steps.saturating_sub(warmup).max(1);
        let done = (step - warmup) as f64 / remaining as f64;
        c.lr * (1.0 - done).max(0.0)
    }

    /// Applies one update to every parameter that has a gradient and passes `filter`.
    /// Returns the pre-clip gradient norm.
    pub fn step_filtered(&mut self, store: &mut ParamStore, grads: &Gradients, filter: impl Fn(ParamId) -> bool) -> Result<f64> {
        if !grads.is_finite() {
            return Err(CoreError::NonFinite("gradient".into()));
        }
        let norm = grads.l2_norm();
        let clip = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let lr = self.lr_at(self.step);
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads.iter() {
            if !filter(id) {
                continue;
            }
            let i = id.index();
            let decay = if store.value(id).shape().len() >= 2 { c.weight_decay } else { 0.0 };
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                w[j] -= lr * (update + decay * w[j]);
            }
        }
        Ok(norm)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        self.step_filtered(store, grads, |_| true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, ParamGroup};

    #[test]
    fn schedule_warms_up_then_decays() {
        let store = ParamStore::new();
        let opt = AdamW::new(&store, OptimizerConfig { lr: 1.0, ..Default::default() }, 100).unwrap();
        assert!((opt.lr_at(0) - 0.2).abs() < 1e-12);
        assert!((opt.lr_at(4) - 1.0).abs() < 1e-12);
        assert!(opt.lr_at(50) < 1.0 && opt.lr_at(50) > 0.0);
        assert!(opt.lr_at(99) < opt.lr_at(50));
    }

    #[test]
    fn first_step_moves_against_gradient_by_lr() {
        // With bias correction the first Adam update is lr · sign(g).
        let mut store = ParamStore::new();
        let id = store.add("x", ParamGroup::Encoder, Tensor::row(&[1.0, -2.0]));
        let config = OptimizerConfig {
            lr: 0.1,
            warmup_fraction: 0.0,
            weight_decay: 0.0,
            linear_decay: false,
            clip_norm: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(&store, config, 10).unwrap();
        let grads = {
            let mut g = Graph::with_grad(&store);
            let x = g.param(id);
            let sq = g.tape.square(x).unwrap();
            let loss = g.tape.sum(sq).unwrap();
            g.backward(loss).unwrap()
        };
        opt.step(&mut store, &grads).unwrap();
        let w = store.value(id).data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 1.9).abs() < 1e-6);
    }
}
