//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm bound; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
        }
    }
}

/// First and second moments of one parameter.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &BTreeMap<String, Moments> {
        &self.state
    }

    pub fn restore(&mut self, step: u64, state: BTreeMap<String, Moments>) {
        self.step = step;
        self.state = state;
    }

    /// Global L2 norm of the gradients of all parameters in `store`.
    pub fn grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0f64;
        for (_, var) in store.vars() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// One update. Parameters without a gradient are left untouched. Weight
    /// decay applies to matrices and kernels only (rank >= 2).
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<StepStats> {
        let grad_norm = Self::grad_norm(store, grads)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                value: grad_norm,
                epoch: 0,
                provenance: "gradient norm".into(),
            });
        }
        let clip_scale = if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            self.cfg.grad_clip / (grad_norm + 1e-6)
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g * clip_scale)?;
            let theta = var.as_detached_tensor();
            let st = match self.state.remove(&name) {
                Some(s) => s,
                None => Moments {
                    m: theta.zeros_like()?,
                    v: theta.zeros_like()?,
                },
            };
            let m = ((st.m * b1)? + (&g * (1.0 - b1))?)?;
            let v = ((st.v * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let denom = ((&v / bc2)?.sqrt()? + self.cfg.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let mut next = theta.clone();
            if self.cfg.weight_decay > 0.0 && theta.rank() >= 2 {
                next = (next * (1.0 - lr * self.cfg.weight_decay))?;
            }
            next = (next - (update * lr)?)?;
            var.set(&next)?;
            self.state.insert(name, Moments { m, v });
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}
