//! Vanilla and KV shifting attention.
//!
//! Keys and values are replaced by causal mixtures of the current and
//! previous rows before the usual scaled dot-product attention:
//!
//! ```text
//! K̂_t = α₁ K_t + α₂ K_{t-1} (+ … + α_{w+1} K_{t-w})
//! V̂_t = β₁ V_t + β₂ V_{t-1} (+ … )
//! out = softmax(Q K̂ᵀ / σ  [− m·|i−j|], causal) V̂ W_O
//! ```
//!
//! Rows before a sequence start are zero. Coefficients are learned per KV
//! head. Rotary embeddings, when enabled, rotate `Q` and the mixed `K̂`.

mod decode;

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttnGeometry, Graph, SeqLayout, Var};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use decode::{DecodeCache, LayerCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftVariant {
    /// Unconstrained coefficients.
    Free,
    /// `α₁ = logistic(a)`, `α₂ = 1 − α₁` (likewise β); window 1 only.
    Gate,
    /// Coefficients clamped into `[0, 1]` after every optimizer step.
    Clamp01,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PosEmb {
    Rope { base: f64 },
    Alibi { slope: f64 },
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    /// Number of previous rows mixed in; 0 is vanilla attention.
    pub window: usize,
    pub variant: ShiftVariant,
}

impl ShiftSpec {
    pub const VANILLA: ShiftSpec = ShiftSpec {
        window: 0,
        variant: ShiftVariant::Free,
    };
    pub const KV_SHIFT: ShiftSpec = ShiftSpec {
        window: 1,
        variant: ShiftVariant::Free,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub hidden: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub pos_emb: PosEmb,
    /// Score divisor σ (√head_dim unless overridden).
    pub scale: f64,
    pub shift: ShiftSpec,
    pub k_shift_enabled: bool,
    pub v_shift_enabled: bool,
}

impl AttnConfig {
    /// Multi-head attention with `scale = √head_dim`, RoPE base 100 000 and
    /// the given shift mode.
    pub fn new(hidden: usize, heads: usize, kv_heads: usize, shift: ShiftSpec) -> Self {
        let head_dim = hidden / heads.max(1);
        Self {
            hidden,
            heads,
            kv_heads,
            pos_emb: PosEmb::Rope { base: 100_000.0 },
            scale: libm::sqrt(head_dim as f64),
            shift,
            k_shift_enabled: shift.window > 0,
            v_shift_enabled: shift.window > 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.hidden == 0 {
            return Err(Error::config("hidden, heads and kv_heads must be positive"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.kv_heads > self.heads || !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::config(format!(
                "kv_heads {} must divide heads {}",
                self.kv_heads, self.heads
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::config("scale must be positive"));
        }
        if self.shift.window > 3 {
            return Err(Error::config("shift window must be in 0..=3"));
        }
        if self.shift.variant == ShiftVariant::Gate && self.shift.window != 1 {
            return Err(Error::config("gate variant requires window 1"));
        }
        if self.shift.window == 0 && (self.k_shift_enabled || self.v_shift_enabled) {
            return Err(Error::config("window 0 cannot enable K/V shifting"));
        }
        if let PosEmb::Rope { base } = self.pos_emb {
            if !self.head_dim().is_multiple_of(2) || !(base > 1.0) {
                return Err(Error::config("rope needs an even head_dim and base > 1"));
            }
        }
        if let PosEmb::Alibi { slope } = self.pos_emb {
            if !(slope >= 0.0) {
                return Err(Error::config("alibi slope must be non-negative"));
            }
        }
        Ok(())
    }

    fn alibi_slope(&self) -> f64 {
        match self.pos_emb {
            PosEmb::Alibi { slope } => slope,
            _ => 0.0,
        }
    }
}

/// Learned mixing coefficients of one layer.
///
/// For `Free`/`Clamp01` the tensors are `[kv_heads, window + 1]` with column
/// 0 multiplying the current row. For `Gate` they are `[kv_heads]` raw gates.
/// A disabled side (ablation, or window 0) has no tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftParams<F> {
    pub window: usize,
    pub variant: ShiftVariant,
    pub alphas: Option<Tensor<F>>,
    pub betas: Option<Tensor<F>>,
}

impl<F: Real> ShiftParams<F> {
    pub fn vanilla() -> Self {
        Self {
            window: 0,
            variant: ShiftVariant::Free,
            alphas: None,
            betas: None,
        }
    }

    /// Window-1 free coefficients, the same for every head.
    pub fn fixed(kv_heads: usize, alpha: [f64; 2], beta: [f64; 2]) -> Self {
        let mk = |c: [f64; 2]| Tensor::from_fn(&[kv_heads, 2], |i| F::of(c[i % 2]));
        Self {
            window: 1,
            variant: ShiftVariant::Free,
            alphas: Some(mk(alpha)),
            betas: Some(mk(beta)),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.alphas.as_ref().map_or(0, Tensor::numel) + self.betas.as_ref().map_or(0, Tensor::numel)
    }

    /// Effective `[kv_heads × (w+1)]` key coefficients; `(1)` when disabled.
    pub fn key_coeffs(&self, kv_heads: usize) -> Vec<F> {
        self.effective(self.alphas.as_ref(), kv_heads)
    }

    pub fn value_coeffs(&self, kv_heads: usize) -> Vec<F> {
        self.effective(self.betas.as_ref(), kv_heads)
    }

    pub fn taps(&self) -> usize {
        self.window + 1
    }

    fn effective(&self, t: Option<&Tensor<F>>, kv_heads: usize) -> Vec<F> {
        let taps = self.taps();
        match t {
            None => {
                let mut c = vec![F::zero(); kv_heads * taps];
                (0..kv_heads).for_each(|h| c[h * taps] = F::one());
                c
            }
            Some(t) if self.variant == ShiftVariant::Gate => t
                .data()
                .iter()
                .flat_map(|&a| {
                    let p = crate::graph::sigmoid(a);
                    [p, F::one() - p]
                })
                .collect(),
            Some(t) => t.data().to_vec(),
        }
    }
}

/// Projection weights of one attention layer (row-vector convention,
/// `Q = X · W_Q`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWeights<F> {
    pub wq: Tensor<F>,
    pub wk: Tensor<F>,
    pub wv: Tensor<F>,
    pub wo: Tensor<F>,
}

impl<F: Real> AttnWeights<F> {
    pub fn cast<G: Real>(&self) -> AttnWeights<G> {
        AttnWeights {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
        }
    }

    pub fn init(cfg: &AttnConfig, std: f64, rng: &mut RngStream) -> Self {
        let (d, dh) = (cfg.hidden, cfg.head_dim());
        Self {
            wq: Tensor::randn(&[d, cfg.heads * dh], std, rng),
            wk: Tensor::randn(&[d, cfg.kv_heads * dh], std, rng),
            wv: Tensor::randn(&[d, cfg.kv_heads * dh], std, rng),
            wo: Tensor::randn(&[cfg.heads * dh, d], std, rng),
        }
    }
}

/// Sequence shift: row `t` of the output is row `t − n` of the input,
/// zero for `t < n`. `x` is `[B, L, …]`.
pub fn shift_seq<F: Real>(x: &Tensor<F>, n: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::dims("shift_seq", s, &[n]));
    }
    let len = s[1];
    if n >= len {
        return Err(Error::Range(format!("shift {n} >= sequence length {len}")));
    }
    let mut coeffs = vec![F::zero(); n + 1];
    coeffs[n] = F::one();
    mix_shift(x, &coeffs)
}

/// `out_t = c₀ x_t + c₁ x_{t−1} + … + c_w x_{t−w}` along axis 1 of a
/// `[B, L, …]` tensor, rows before the start treated as zero.
pub fn mix_shift<F: Real>(x: &Tensor<F>, coeffs: &[F]) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::dims("mix_shift", s, &[coeffs.len()]));
    }
    if coeffs.is_empty() {
        return Err(Error::contract("mix_shift: coefficient count mismatch"));
    }
    let (b, len) = (s[0], s[1]);
    let row: usize = s[2..].iter().product();
    let xd = x.data();
    let mut out = vec![F::zero(); xd.len()];
    for bi in 0..b {
        for t in 0..len {
            let o = (bi * len + t) * row;
            for (j, &c) in coeffs.iter().enumerate().take(t + 1) {
                let i = (bi * len + t - j) * row;
                for k in 0..row {
                    out[o + k] += c * xd[i + k];
                }
            }
        }
    }
    Tensor::new(s, out)
}

/// Draws initial shift coefficients for one layer.
///
/// Window `w`: the first `w` coefficients are `U(0,1)` and the last is one
/// minus their sum, so every head starts with coefficients summing to one.
/// The gate variant stores `a = logit(α₁)` for `α₁ ~ U(0,1)`.
pub fn init_shift_params<F: Real>(cfg: &AttnConfig, rng: &mut RngStream) -> ShiftParams<F> {
    let w = cfg.shift.window;
    if w == 0 {
        return ShiftParams::vanilla();
    }
    let h = cfg.kv_heads;
    let gate = cfg.shift.variant == ShiftVariant::Gate;
    let draw = |rng: &mut RngStream| -> Tensor<F> {
        if gate {
            Tensor::from_fn(&[h], |_| {
                let u = rng.uniform().clamp(1e-12, 1.0 - 1e-12);
                F::of(libm::log(u / (1.0 - u)))
            })
        } else {
            let mut data = Vec::with_capacity(h * (w + 1));
            for _ in 0..h {
                let mut rest = 1.0;
                for _ in 0..w {
                    let u = rng.uniform();
                    rest -= u;
                    data.push(F::of(u));
                }
                data.push(F::of(rest));
            }
            Tensor::new(&[h, w + 1], data).expect("shape")
        }
    };
    // Both sides are drawn so ablations do not change the other side's stream.
    let alphas = draw(rng);
    let betas = draw(rng);
    ShiftParams {
        window: w,
        variant: cfg.shift.variant,
        alphas: cfg.k_shift_enabled.then_some(alphas),
        betas: cfg.v_shift_enabled.then_some(betas),
    }
}

/// Clamps every coefficient into `[0, 1]` for the clamp variant; no-op otherwise.
pub fn constrain_shift_params<F: Real>(params: &mut ShiftParams<F>) {
    if params.variant != ShiftVariant::Clamp01 {
        return;
    }
    for t in [params.alphas.as_mut(), params.betas.as_mut()].into_iter().flatten() {
        t.data_mut()
            .iter_mut()
            .for_each(|c| *c = c.max(F::zero()).min(F::one()));
    }
}

/// Graph handles of one layer's attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttnVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub alphas: Option<Var>,
    pub betas: Option<Var>,
}

impl AttnVars {
    pub fn record<F: Real>(g: &mut Graph<F>, w: &AttnWeights<F>, s: &ShiftParams<F>) -> Self {
        Self {
            wq: g.param(&w.wq),
            wk: g.param(&w.wk),
            wv: g.param(&w.wv),
            wo: g.param(&w.wo),
            alphas: s.alphas.as_ref().map(|t| g.param(t)),
            betas: s.betas.as_ref().map(|t| g.param(t)),
        }
    }
}

/// Intermediate nodes of one attention evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AttnTrace {
    pub out: Var,
    pub k_raw: Var,
    pub v_raw: Var,
    /// Mixed keys after rotary embedding (what the cache stores).
    pub k_hat: Var,
    pub v_hat: Var,
    pub probs: Var,
}

/// Where an attention call sits, for error messages.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttnSite {
    pub layer: usize,
}

/// Full KV shifting attention over a packed batch `x: [N, hidden]`.
///
/// `positions` are the absolute positions used by rotary embeddings and
/// `extra_mask` optionally restricts each sequence's causal mask.
#[allow(clippy::too_many_arguments)]
pub fn kv_shift_attention<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    vars: &AttnVars,
    cfg: &AttnConfig,
    variant: ShiftVariant,
    layout: &Arc<SeqLayout>,
    positions: &[usize],
    extra_mask: Option<Vec<Vec<bool>>>,
    site: AttnSite,
) -> Result<AttnTrace> {
    if let Some(bad) = g.value(x).iter().position(|v| !v.is_finite()) {
        let row = bad / cfg.hidden;
        return Err(Error::Numeric {
            location: format!("layer {} attention input row {row}", site.layer),
        });
    }
    let q = g.matmul(x, vars.wq)?;
    let k = g.matmul(x, vars.wk)?;
    let v = g.matmul(x, vars.wv)?;
    attention_core(g, q, k, v, vars.alphas, vars.betas, vars.wo, cfg, variant, layout, positions, extra_mask, site)
}

/// Attention from already projected `q: [N, h·dh]`, `k, v: [N, h₁·dh]`.
/// `wo` may be omitted to return the concatenated heads.
#[allow(clippy::too_many_arguments)]
pub fn attention_core<F: Real>(
    g: &mut Graph<F>,
    q: Var,
    k: Var,
    v: Var,
    alphas: Option<Var>,
    betas: Option<Var>,
    wo: impl Into<Option<Var>>,
    cfg: &AttnConfig,
    variant: ShiftVariant,
    layout: &Arc<SeqLayout>,
    positions: &[usize],
    extra_mask: Option<Vec<Vec<bool>>>,
    site: AttnSite,
) -> Result<AttnTrace> {
    let h1 = cfg.kv_heads;
    let coeffs = |g: &mut Graph<F>, p: Option<Var>| -> Result<Option<Var>> {
        match p {
            None => Ok(None),
            Some(p) if variant == ShiftVariant::Gate => g.gate_coeffs(p).map(Some),
            Some(p) => Ok(Some(p)),
        }
    };
    let ka = coeffs(g, alphas)?;
    let vb = coeffs(g, betas)?;
    let k_mixed = match ka {
        Some(c) => g.mix_shift(k, c, layout, h1)?,
        None => k,
    };
    let v_hat = match vb {
        Some(c) => g.mix_shift(v, c, layout, h1)?,
        None => v,
    };
    let (q_r, k_hat) = match cfg.pos_emb {
        PosEmb::Rope { base } => (
            g.rope(q, positions, cfg.heads, base)?,
            g.rope(k_mixed, positions, h1, base)?,
        ),
        _ => (q, k_mixed),
    };
    let geom = Arc::new(AttnGeometry::new(
        (**layout).clone(),
        cfg.heads,
        h1,
        cfg.head_dim(),
        cfg.alibi_slope(),
        extra_mask,
    )?);
    let scores = g.attn_scores(q_r, k_hat, &geom, F::of(cfg.scale))?;
    check_scores(g, scores, &geom, site)?;
    let probs = g.masked_softmax(scores, &Arc::new(geom.mask.clone()))?;
    let heads = g.attn_apply(probs, v_hat, &geom)?;
    let out = match wo.into() {
        Some(wo) => g.matmul(heads, wo)?,
        None => heads,
    };
    Ok(AttnTrace {
        out,
        k_raw: k,
        v_raw: v,
        k_hat,
        v_hat,
        probs,
    })
}

fn check_scores<F: Real>(g: &Graph<F>, s: Var, geom: &AttnGeometry, site: AttnSite) -> Result<()> {
    let sv = g.value(s);
    if sv.iter().all(|v| v.is_finite()) {
        return Ok(());
    }
    let bad = sv.iter().position(|v| !v.is_finite()).unwrap_or(0);
    let block = geom
        .mask
        .blocks
        .iter()
        .rposition(|b| b.offset <= bad)
        .unwrap_or(0);
    Err(Error::Numeric {
        location: format!("layer {} head {}", site.layer, block % geom.heads),
    })
}

#[cfg(test)]
mod tests;
