//! AdamW with linear warmup and decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderState;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub learning_rate: f64,
    #[serde(default = "defaults::weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "defaults::beta1")]
    pub beta1: f64,
    #[serde(default = "defaults::beta2")]
    pub beta2: f64,
    #[serde(default = "defaults::eps")]
    pub eps: f64,
    /// Fraction of all steps spent warming up linearly from zero.
    #[serde(default = "defaults::warmup")]
    pub warmup_frac: f64,
    /// Max global L2 norm of the gradient; `None` disables clipping.
    #[serde(default = "defaults::clip")]
    pub max_grad_norm: Option<f64>,
}

mod defaults {
    pub fn weight_decay() -> f64 {
        0.01
    }
    pub fn beta1() -> f64 {
        0.9
    }
    pub fn beta2() -> f64 {
        0.999
    }
    pub fn eps() -> f64 {
        1e-8
    }
    pub fn warmup() -> f64 {
        0.1
    }
    pub fn clip() -> Option<f64> {
        Some(1.0)
    }
}

impl OptimConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            weight_decay: defaults::weight_decay(),
            beta1: defaults::beta1(),
            beta2: defaults::beta2(),
            eps: defaults::eps(),
            warmup_frac: defaults::warmup(),
            max_grad_norm: defaults::clip(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite_pos = |v: f64| v.is_finite() && v > 0.0;
        if !finite_pos(self.learning_rate) || !finite_pos(self.eps) {
            return Err(Error::Config("learning rate and eps must be finite and > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 {
            return Err(Error::Config("warmup fraction must lie in [0, 1] and weight decay be >= 0".into()));
        }
        if self.max_grad_norm.is_some_and(|c| !finite_pos(c)) {
            return Err(Error::Config("gradient clip norm must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Learning-rate multiplier: linear ramp over the warmup steps, then linear decay to 0.
pub fn schedule(step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = (warmup_frac * total as f64).ceil() as usize;
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        1.0
    } else {
        ((total - step) as f64 / (total - warmup) as f64).clamp(0.0, 1.0)
    }
}

/// Decoupled-weight-decay Adam over named encoder parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    cfg: OptimConfig,
    total_steps: usize,
    step: usize,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, total_steps: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, total_steps: total_steps.max(1), step: 0, moments: BTreeMap::new() })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.learning_rate * schedule(self.step, self.total_steps, self.cfg.warmup_frac)
    }

    /// Applies one update. Only matrices are weight-decayed; vectors (biases,
    /// norm scales) are not. Returns the pre-clipping gradient norm.
    pub fn step(&mut self, state: &mut EncoderState<T>, mut grads: BTreeMap<String, Vec<T>>) -> Result<f64> {
        let norm = grads
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Degenerate("non-finite gradient".into()));
        }
        if let Some(max) = self.cfg.max_grad_norm {
            if norm > max {
                let s = T::of(max / norm);
                grads.values_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(self.cfg.eps));
        let (one_b1, one_b2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let step_size = T::of(lr / c1);
        let c2_sqrt = T::of(c2.sqrt());
        for (name, g) in grads {
            let p = state
                .param_mut(&name)
                .ok_or_else(|| Error::Shape(format!("gradient for unknown parameter `{name}`")))?;
            if p.numel() != g.len() {
                return Err(Error::Shape(format!("gradient for `{name}` has the wrong size")));
            }
            let decay = if p.shape().len() >= 2 { T::of(1.0 - lr * self.cfg.weight_decay) } else { T::one() };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                *w = *w * decay - step_size * *mi / ((*vi).sqrt() / c2_sqrt + eps);
            }
        }
        Ok(norm)
    }
}
