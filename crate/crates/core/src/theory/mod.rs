//! Numerical checks of the induction-head constructions, the simplified
//! two-parameter loss landscape, and related identities.
//!
//! Induction head (1-indexed, query `x_L`):
//!
//! ```text
//! IH(x) = Σ_{s=2}^{L−1} softmax_s(x_L·x_{s−1}/σ − m|L−s|) x_s
//! ```

mod construct;
mod landscape;
mod misc;
mod simplified;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use construct::{ih_model, KvsaIh, KvsaOutput, TwoLayerIh};
pub use landscape::{eq10_loss, gd_trajectory, landscape_grid, Eq10Point, LandscapePoint, Trajectory};
pub use misc::{shift_param_quadrant_census, virtual_head_check, QuadrantCensus};
pub use simplified::{
    appendix_logit_table, mc_simplified, mc_simplified_loss, table_loss, LogitTable, LogitVariant, McEstimate,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IhParams {
    pub sigma: f64,
    pub slope: f64,
}

impl IhParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.slope >= 0.0) {
            return Err(Error::config("IH needs sigma > 0 and slope >= 0"));
        }
        Ok(())
    }
}

/// Direct evaluation of the induction-head definition on an `L × d`
/// sequence.
pub fn ih_oracle(x: &Tensor<f64>, p: &IhParams) -> Result<Vec<f64>> {
    p.validate()?;
    let s = x.shape();
    if s.len() != 2 || s[0] < 3 {
        return Err(Error::contract("ih_oracle needs an L × d sequence with L >= 3"));
    }
    let (l, d) = (s[0], s[1]);
    let row = |i: usize| &x.data()[i * d..(i + 1) * d];
    let q = row(l - 1);
    // Zero-based s runs over 1..=L−2; key x_{s−1}, value x_s.
    let logits: Vec<f64> = (1..l - 1)
        .map(|s| dot(q, row(s - 1)) / p.sigma - p.slope * (l - 1 - s) as f64)
        .collect();
    let w = softmax(&logits);
    let mut out = alloc::vec![0.0; d];
    for (k, s) in (1..l - 1).enumerate() {
        out.iter_mut().zip(row(s)).for_each(|(o, &v)| *o += w[k] * v);
    }
    Ok(out)
}

/// Largest `‖candidate(x) − IH(x)‖_∞` over `n_probes` sequences per length,
/// with i.i.d. `N(0, 1/d)` coordinates.
pub fn ih_error(
    candidate: impl Fn(&Tensor<f64>) -> Result<Vec<f64>>,
    p: &IhParams,
    lengths: &[usize],
    d: usize,
    n_probes: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let mut worst = 0.0f64;
    for &l in lengths {
        for _ in 0..n_probes {
            let x = probe(l, d, rng);
            let a = candidate(&x)?;
            let b = ih_oracle(&x, p)?;
            if a.len() != b.len() {
                return Err(Error::dims("ih_error", &[a.len()], &[b.len()]));
            }
            worst = a.iter().zip(&b).fold(worst, |m, (u, v)| m.max((u - v).abs()));
        }
    }
    Ok(worst)
}

/// An `L × d` sequence with i.i.d. `N(0, 1/d)` entries.
pub fn probe(l: usize, d: usize, rng: &mut RngStream) -> Tensor<f64> {
    Tensor::randn(&[l, d], libm::sqrt(1.0 / d as f64), rng)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| libm::exp(v - m)).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
