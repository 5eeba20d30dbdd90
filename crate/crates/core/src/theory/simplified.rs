//! The simplified one-layer induction model: tied random embeddings,
//! identity projections, no residual, FFN, norm or positions, and a
//! sequence `x₁ … x_T, x_i` whose answer is `x_{i+1}`.
//!
//! As `d → ∞` the logits of the last position have a closed form with
//! `S = 2e^{α₁} + e^{α₂} + (T − 2)`:
//!
//! ```text
//! token    logit · S
//! i−1, T   β₁ + β₂e^{α₂}    (β₁ + β₂e^{α₁} in the in-text derivation)
//! i        2β₁e^{α₁} + β₂e^{α₂}
//! i+1      β₁e^{α₂} + β₂
//! other    β₁ + β₂
//! ```

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{dot, softmax};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tasks::gen_simplified_sample;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitVariant {
    /// `e^{α₂}` on the `β₂` term of rows i−1 and T.
    AsPrinted,
    /// `e^{α₁}` on the `β₂` term of rows i−1 and T.
    InTextDerivation,
}

impl LogitVariant {
    pub const ALL: [LogitVariant; 2] = [LogitVariant::AsPrinted, LogitVariant::InTextDerivation];

    pub fn name(self) -> &'static str {
        match self {
            LogitVariant::AsPrinted => "as_printed",
            LogitVariant::InTextDerivation => "in_text_derivation",
        }
    }
}

/// Last-position logits by the role of the predicted token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogitTable {
    pub prev: f64,
    pub cur: f64,
    pub next: f64,
    pub last: f64,
    pub other: f64,
}

pub fn appendix_logit_table(alpha: [f64; 2], beta: [f64; 2], t: usize, variant: LogitVariant) -> LogitTable {
    let (e1, e2) = (libm::exp(alpha[0]), libm::exp(alpha[1]));
    let s = 2.0 * e1 + e2 + (t as f64 - 2.0);
    let ev = match variant {
        LogitVariant::AsPrinted => e2,
        LogitVariant::InTextDerivation => e1,
    };
    let edge = (beta[0] + beta[1] * ev) / s;
    LogitTable {
        prev: edge,
        cur: (2.0 * beta[0] * e1 + beta[1] * e2) / s,
        next: (beta[0] * e2 + beta[1]) / s,
        last: edge,
        other: (beta[0] + beta[1]) / s,
    }
}

/// Cross-entropy of the answer under the closed-form table, over a
/// vocabulary of the `T` sequence tokens.
pub fn table_loss(alpha: [f64; 2], beta: [f64; 2], t: usize, variant: LogitVariant) -> f64 {
    let l = appendix_logit_table(alpha, beta, t, variant);
    let z = [l.prev, l.cur, l.next, l.last, l.other];
    let m = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let sum = libm::exp(l.prev - m)
        + libm::exp(l.cur - m)
        + libm::exp(l.next - m)
        + libm::exp(l.last - m)
        + (t as f64 - 4.0) * libm::exp(l.other - m);
    m + libm::log(sum) - l.next
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub loss: f64,
    pub std_err: f64,
    pub mean_logits: LogitTable,
    pub n_samples: usize,
}

/// Monte Carlo estimate of the last-position loss of the simplified model
/// with `d`-dimensional `N(0, 1/d)` embeddings, fresh per sample.
pub fn mc_simplified(d: usize, t: usize, alpha: [f64; 2], beta: [f64; 2], n: usize, rng: &mut RngStream) -> Result<McEstimate> {
    if d == 0 || t < 4 || n == 0 {
        return Err(Error::config("mc_simplified needs d >= 1, T >= 4 and n >= 1"));
    }
    let std = libm::sqrt(1.0 / d as f64);
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut acc = [0.0f64; 5];
    let mut cnt = [0usize; 5];
    let mut emb = vec![0.0f64; t * d];
    for _ in 0..n {
        emb.iter_mut().for_each(|v| *v = std * rng.normal());
        let s = gen_simplified_sample(rng, t, t)?;
        let x = |p: usize| &emb[s.tokens[p] * d..(s.tokens[p] + 1) * d];
        let len = s.tokens.len();
        let q = x(len - 1);
        // Scores q·k̂_p with k̂_p = α₁x_p + α₂x_{p−1}; the same split for v̂.
        let qx: Vec<f64> = (0..len).map(|p| dot(q, x(p))).collect();
        let scores: Vec<f64> = (0..len)
            .map(|p| alpha[0] * qx[p] + if p > 0 { alpha[1] * qx[p - 1] } else { 0.0 })
            .collect();
        let w = softmax(&scores);
        let mut out = vec![0.0; d];
        for p in 0..len {
            let cur = beta[0] * w[p];
            out.iter_mut().zip(x(p)).for_each(|(o, &v)| *o += cur * v);
            if p + 1 < len {
                let nxt = beta[1] * w[p + 1];
                out.iter_mut().zip(x(p)).for_each(|(o, &v)| *o += nxt * v);
            }
        }
        let logits: Vec<f64> = (0..t).map(|k| dot(&emb[k * d..(k + 1) * d], &out)).collect();
        let target = s.target();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + libm::log(logits.iter().map(|&z| libm::exp(z - m)).sum::<f64>());
        let loss = lse - logits[target];
        sum += loss;
        sq += loss * loss;
        let roles = [s.tokens[s.repeat - 1], s.tokens[s.repeat], target, s.tokens[t - 1]];
        for (k, &logit) in logits.iter().enumerate() {
            let role = match roles.iter().position(|&r| r == k) {
                // x_T coincides with the answer when i = T − 1.
                Some(3) if roles[2] == k => 2,
                Some(r) => r,
                None => 4,
            };
            acc[role] += logit;
            cnt[role] += 1;
        }
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = (sq / nf - mean * mean).max(0.0) * nf / (nf - 1.0).max(1.0);
    let avg = |r: usize| if cnt[r] == 0 { 0.0 } else { acc[r] / cnt[r] as f64 };
    Ok(McEstimate {
        loss: mean,
        std_err: libm::sqrt(var / nf),
        mean_logits: LogitTable {
            prev: avg(0),
            cur: avg(1),
            next: avg(2),
            last: avg(3),
            other: avg(4),
        },
        n_samples: n,
    })
}

pub fn mc_simplified_loss(d: usize, t: usize, alpha: [f64; 2], beta: [f64; 2], n: usize, rng: &mut RngStream) -> Result<f64> {
    mc_simplified(d, t, alpha, beta, n, rng).map(|e| e.loss)
}
