//! MADGRAD: momentumized, adaptive, dual-averaged gradient descent.
//!
//! Per parameter with initial value `x0`, step `k` and learning rate `lr`:
//!
//! ```text
//! lamb = lr * sqrt(k + 1)
//! p    = p * (1 - lr * wd)            (decoupled decay)
//! v   += lamb * g^2
//! s   += lamb * g
//! z    = x0 - s / (cbrt(v) + eps)
//! p    = momentum * p + (1 - momentum) * z
//! ```

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MadgradConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for MadgradConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 0.01,
            eps: 1e-6,
        }
    }
}

struct Slot {
    var: Var,
    x0: Tensor,
    grad_sum_sq: Tensor,
    grad_sum: Tensor,
}

pub struct Madgrad {
    config: MadgradConfig,
    slots: Vec<Slot>,
    k: u64,
}

impl Madgrad {
    pub fn new(params: Vec<Var>, config: MadgradConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::config("momentum", format!("must lie in [0, 1), got {}", config.momentum)));
        }
        let slots = params
            .into_iter()
            .map(|var| {
                let t = var.as_tensor().detach();
                Ok(Slot {
                    x0: t.copy()?,
                    grad_sum_sq: t.zeros_like()?,
                    grad_sum: t.zeros_like()?,
                    var,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, slots, k: 0 })
    }

    /// Number of steps taken.
    pub fn steps(&self) -> u64 {
        self.k
    }

    /// One update with learning rate `lr`. Parameters without a gradient in
    /// `grads` are left unchanged.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        let MadgradConfig {
            momentum,
            weight_decay,
            eps,
        } = self.config;
        let ck = 1.0 - momentum;
        let lamb = lr * ((self.k + 1) as f64).sqrt();
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = g.to_dtype(slot.var.dtype())?;
            let mut p = slot.var.as_tensor().detach();
            if weight_decay != 0.0 {
                p = p.affine(1.0 - lr * weight_decay, 0.0)?;
            }
            slot.grad_sum_sq = (&slot.grad_sum_sq + g.sqr()?.affine(lamb, 0.0)?)?;
            slot.grad_sum = (&slot.grad_sum + g.affine(lamb, 0.0)?)?;
            let rms = (slot.grad_sum_sq.powf(1.0 / 3.0)? + eps)?;
            let z = (&slot.x0 - slot.grad_sum.div(&rms)?)?;
            let next = (p.affine(1.0 - ck, 0.0)? + z.affine(ck, 0.0)?)?;
            slot.var.set(&next)?;
        }
        self.k += 1;
        Ok(())
    }

    /// Optimizer state for checkpointing: `(suffix, slot index, tensor)`.
    pub fn state_tensors(&self) -> Vec<(usize, &'static str, Tensor)> {
        let mut out = Vec::new();
        for (i, s) in self.slots.iter().enumerate() {
            out.push((i, "x0", s.x0.clone()));
            out.push((i, "grad_sum_sq", s.grad_sum_sq.clone()));
            out.push((i, "grad_sum", s.grad_sum.clone()));
        }
        out
    }

    pub fn load_state(&mut self, k: u64, mut lookup: impl FnMut(usize, &str) -> Option<Tensor>) -> Result<()> {
        for (i, s) in self.slots.iter_mut().enumerate() {
            for (name, slot) in [("x0", &mut s.x0), ("grad_sum_sq", &mut s.grad_sum_sq), ("grad_sum", &mut s.grad_sum)] {
                let t = lookup(i, name).ok_or_else(|| Error::Input(format!("missing optimizer state {i}.{name}")))?;
                if t.dims() != slot.dims() {
                    return Err(Error::Input(format!("optimizer state {i}.{name} has wrong shape")));
                }
                *slot = t;
            }
        }
        self.k = k;
        Ok(())
    }
}

/// Global L2 norm of the gradients of `params`.
pub fn grad_norm(grads: &GradStore, params: &[Var]) -> Result<f64> {
    let mut total = 0.0;
    for v in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += crate::nn::scalar(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(total.sqrt())
}

/// Scales every gradient so the global norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut GradStore, params: &[Var], max_norm: f64) -> Result<f64> {
    let norm = grad_norm(grads, params)?;
    if norm > max_norm && norm.is_finite() {
        let scale = max_norm / norm;
        for v in params {
            if let Some(g) = grads.get(v.as_tensor()) {
                let scaled = g.affine(scale, 0.0)?;
                grads.insert(v.as_tensor(), scaled);
            }
        }
    }
    Ok(norm)
}
