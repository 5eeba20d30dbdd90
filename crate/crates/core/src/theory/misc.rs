//! Virtual-head composition identity and the shift-coefficient census.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::real::{gemm_rm, Real};
use crate::tensor::Tensor;

fn check_causal_stochastic(a: &Tensor<f64>, name: &str) -> Result<usize> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] || s[0] == 0 {
        return Err(Error::contract(alloc::format!("{name} must be a square matrix")));
    }
    let l = s[0];
    for i in 0..l {
        let row = &a.data()[i * l..(i + 1) * l];
        if row[i + 1..].iter().any(|&v| v != 0.0) {
            return Err(Error::contract(alloc::format!("{name} has weight above the diagonal in row {i}")));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(alloc::format!("{name} row {i} is not a probability vector")));
        }
    }
    Ok(l)
}

/// Max over `c ≤ j` of `|(A₂A₁)_{j,c} − Σ_{k=c}^{j} A₂[j,k]·A₁[k,c]|`.
pub fn virtual_head_check(a1: &Tensor<f64>, a2: &Tensor<f64>) -> Result<f64> {
    let l = check_causal_stochastic(a1, "A1")?;
    if check_causal_stochastic(a2, "A2")? != l {
        return Err(Error::dims("virtual_head_check", a1.shape(), a2.shape()));
    }
    let (x, y) = (a1.data(), a2.data());
    let mut prod = alloc::vec![0.0f64; l * l];
    gemm_rm(l, l, l, y, false, x, false, &mut prod, false);
    let mut worst = 0.0f64;
    for j in 0..l {
        for c in 0..=j {
            let full = prod[j * l + c];
            let part: f64 = (c..=j).map(|k| y[j * l + k] * x[k * l + c]).sum();
            worst = worst.max((full - part).abs());
        }
    }
    Ok(worst)
}

/// KV heads by whether `α₁ > α₂` and `β₁ > β₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QuadrantCensus {
    pub alpha_le_beta_le: usize,
    pub alpha_le_beta_gt: usize,
    pub alpha_gt_beta_le: usize,
    pub alpha_gt_beta_gt: usize,
}

impl QuadrantCensus {
    pub fn total(&self) -> usize {
        self.alpha_le_beta_le + self.alpha_le_beta_gt + self.alpha_gt_beta_le + self.alpha_gt_beta_gt
    }

    fn add(&mut self, a_gt: bool, b_gt: bool) {
        match (a_gt, b_gt) {
            (false, false) => self.alpha_le_beta_le += 1,
            (false, true) => self.alpha_le_beta_gt += 1,
            (true, false) => self.alpha_gt_beta_le += 1,
            (true, true) => self.alpha_gt_beta_gt += 1,
        }
    }
}

/// Counts every KV head of every layer (effective coefficients, so gates
/// and ablated sides are included).
pub fn shift_param_quadrant_census<F: Real>(model: &Model<F>) -> Result<QuadrantCensus> {
    let cfg = &model.cfg.attn;
    if cfg.shift.window != 1 {
        return Err(Error::contract("quadrant census needs window-1 shifting"));
    }
    let mut c = QuadrantCensus::default();
    for l in &model.layers {
        let a = l.shift.key_coeffs(cfg.kv_heads);
        let b = l.shift.value_coeffs(cfg.kv_heads);
        for h in 0..cfg.kv_heads {
            c.add(a[2 * h] > a[2 * h + 1], b[2 * h] > b[2 * h + 1]);
        }
    }
    Ok(c)
}
