//! AdamW, the warmup-then-constant schedule, and the training loop.

mod data;
mod trainer;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub use data::{EvalMetrics, EvalSet, LossPositions, Task, TaskConfig, TrainBatch};
pub use trainer::{batch_grads, held_out, MetricRecord, TrainConfig, TrainState, Trainer};

/// Linear warmup from 0 to `lr_peak`, then constant.
pub fn lr_at(step: u64, lr_peak: f64, warmup_steps: u64) -> f64 {
    if step < warmup_steps {
        lr_peak * step as f64 / warmup_steps as f64
    } else {
        lr_peak
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// First and second moments, one pair per parameter, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> AdamState<F> {
    pub fn zeros_like(params: &[&Tensor<F>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One parameter handed to [`adamw_step`].
pub struct AdamParam<'a, F> {
    pub name: String,
    pub value: &'a mut Tensor<F>,
    pub grad: &'a [F],
    pub decay: bool,
}

/// Decoupled-decay AdamW: `θ ← θ − lr·wd·θ`, then the bias-corrected Adam
/// delta. Gradients are validated before anything is written.
pub fn adamw_step<F: Real>(params: &mut [AdamParam<'_, F>], state: &mut AdamState<F>, cfg: &AdamConfig, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::contract("optimizer state does not match the parameter list"));
    }
    for p in params.iter() {
        if p.grad.len() != p.value.numel() {
            return Err(Error::dims("adamw_step", p.value.shape(), &[p.grad.len()]));
        }
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric {
                location: format!("gradient of {}", p.name),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - libm::pow(b1, state.t as f64);
    let c2 = 1.0 - libm::pow(b2, state.t as f64);
    let (b1f, b2f) = (F::of(b1), F::of(b2));
    let step = F::of(lr / c1);
    let c2_sqrt = F::of(libm::sqrt(c2));
    let eps = F::of(cfg.eps);
    for (i, p) in params.iter_mut().enumerate() {
        let decay = if p.decay { F::of(1.0 - lr * cfg.weight_decay) } else { F::one() };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let w = p.value.data_mut();
        for k in 0..w.len() {
            let g = p.grad[k];
            m[k] = b1f * m[k] + (F::one() - b1f) * g;
            v[k] = b2f * v[k] + (F::one() - b2f) * g * g;
            w[k] = w[k] * decay - step * m[k] / (v[k].sqrt() / c2_sqrt + eps);
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().map(|g| g.f64() * g.f64()).sum();
    let norm = libm::sqrt(sq);
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
