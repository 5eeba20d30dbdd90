//! Incremental decoding with KV shifting.
//!
//! Mixing is causal, so a new token only needs the previous `w` raw key and
//! value rows: `k̂_t = α₁ k_t + α₂ k_{t−1} + …`. The cache keeps those raw
//! rows plus the full history of mixed (and rotated) keys and mixed values.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use super::{AttnConfig, AttnWeights, PosEmb, ShiftParams};
use crate::error::{Error, Result};
use crate::graph::attn_rope_row;
use crate::real::{gemm_rm, Real};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache<F> {
    kv_heads: usize,
    head_dim: usize,
    window: usize,
    raw_k: VecDeque<Vec<F>>,
    raw_v: VecDeque<Vec<F>>,
    k_hat: Vec<F>,
    v_hat: Vec<F>,
}

impl<F: Real> LayerCache<F> {
    pub fn new(cfg: &AttnConfig) -> Self {
        Self {
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
            window: cfg.shift.window,
            raw_k: VecDeque::new(),
            raw_v: VecDeque::new(),
            k_hat: Vec::new(),
            v_hat: Vec::new(),
        }
    }

    /// Builds a cache from prefill rows of one sequence (row-major, each row
    /// `kv_heads * head_dim` wide).
    pub fn from_prefill(cfg: &AttnConfig, raw_k: &[F], raw_v: &[F], k_hat: &[F], v_hat: &[F]) -> Result<Self> {
        let mut c = Self::new(cfg);
        let w = c.width();
        if !raw_k.len().is_multiple_of(w) || [raw_v.len(), k_hat.len(), v_hat.len()].iter().any(|&l| l != raw_k.len()) {
            return Err(Error::contract("prefill rows do not match the cache layout"));
        }
        let rows = raw_k.len() / w;
        for r in rows.saturating_sub(c.window)..rows {
            c.raw_k.push_back(raw_k[r * w..(r + 1) * w].to_vec());
            c.raw_v.push_back(raw_v[r * w..(r + 1) * w].to_vec());
        }
        c.k_hat = k_hat.to_vec();
        c.v_hat = v_hat.to_vec();
        Ok(c)
    }

    fn width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    pub fn len(&self) -> usize {
        self.k_hat.len() / self.width().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.k_hat.is_empty()
    }

    /// Raw key rows retained for mixing (at most `window`).
    pub fn retained_raw_rows(&self) -> usize {
        self.raw_k.len()
    }

    pub fn k_hat(&self) -> &[F] {
        &self.k_hat
    }

    pub fn v_hat(&self) -> &[F] {
        &self.v_hat
    }

    fn check(&self, cfg: &AttnConfig) -> Result<()> {
        if self.kv_heads != cfg.kv_heads || self.head_dim != cfg.head_dim() || self.window != cfg.shift.window {
            return Err(Error::contract("decode cache does not match the attention config"));
        }
        Ok(())
    }

    /// Attention output (after `W_O`) for one new normalised hidden row at
    /// absolute `position`; the cache is extended by that row.
    pub fn attend(
        &mut self,
        cfg: &AttnConfig,
        shift: &ShiftParams<F>,
        w: &AttnWeights<F>,
        x: &[F],
        position: usize,
    ) -> Result<Vec<F>> {
        self.check(cfg)?;
        if position != self.len() {
            return Err(Error::contract("decode position does not follow the cache"));
        }
        let d = cfg.hidden;
        if x.len() != d {
            return Err(Error::dims("incremental_attend", &[d], &[x.len()]));
        }
        let (h, h1, dh) = (cfg.heads, cfg.kv_heads, cfg.head_dim());
        let kw = h1 * dh;
        let mut q = vec![F::zero(); h * dh];
        let mut k = vec![F::zero(); kw];
        let mut v = vec![F::zero(); kw];
        gemm_rm(1, d, h * dh, x, false, w.wq.data(), false, &mut q, false);
        gemm_rm(1, d, kw, x, false, w.wk.data(), false, &mut k, false);
        gemm_rm(1, d, kw, x, false, w.wv.data(), false, &mut v, false);

        let kc = shift.key_coeffs(h1);
        let vc = shift.value_coeffs(h1);
        let taps = shift.taps();
        let mut k_new = mix_row(&k, &self.raw_k, &kc, taps, h1, dh);
        let v_new = mix_row(&v, &self.raw_v, &vc, taps, h1, dh);
        if self.window > 0 {
            self.raw_k.push_back(k);
            self.raw_v.push_back(v);
            while self.raw_k.len() > self.window {
                self.raw_k.pop_front();
                self.raw_v.pop_front();
            }
        }
        if let PosEmb::Rope { base } = cfg.pos_emb {
            attn_rope_row(&mut q, position, h, dh, base);
            attn_rope_row(&mut k_new, position, h1, dh, base);
        }
        self.k_hat.extend_from_slice(&k_new);
        self.v_hat.extend_from_slice(&v_new);

        let slope = F::of(match cfg.pos_emb {
            PosEmb::Alibi { slope } => slope,
            _ => 0.0,
        });
        let inv = F::one() / F::of(cfg.scale);
        let n = self.len();
        let group = h / h1;
        let mut heads = vec![F::zero(); h * dh];
        let mut scores = vec![F::zero(); n];
        for hq in 0..h {
            let kh = hq / group;
            let qh = &q[hq * dh..(hq + 1) * dh];
            let mut m = F::neg_infinity();
            for (j, s) in scores.iter_mut().enumerate() {
                let kj = &self.k_hat[j * kw + kh * dh..j * kw + (kh + 1) * dh];
                let dot = qh.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                *s = dot * inv - slope * F::of((n - 1 - j) as f64);
                m = m.max(*s);
            }
            let mut z = F::zero();
            scores.iter_mut().for_each(|s| {
                *s = (*s - m).exp();
                z += *s;
            });
            let out = &mut heads[hq * dh..(hq + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                let p = p / z;
                let vj = &self.v_hat[j * kw + kh * dh..j * kw + (kh + 1) * dh];
                out.iter_mut().zip(vj).for_each(|(o, &x)| *o += p * x);
            }
        }
        let mut y = vec![F::zero(); d];
        gemm_rm(1, h * dh, d, &heads, false, w.wo.data(), false, &mut y, false);
        Ok(y)
    }
}

fn mix_row<F: Real>(cur: &[F], past: &VecDeque<Vec<F>>, c: &[F], taps: usize, heads: usize, dh: usize) -> Vec<F> {
    let mut out = vec![F::zero(); cur.len()];
    for h in 0..heads {
        for j in 0..taps {
            let src: &[F] = if j == 0 {
                cur
            } else if j <= past.len() {
                &past[past.len() - j]
            } else {
                continue;
            };
            let cj = c[h * taps + j];
            for t in h * dh..(h + 1) * dh {
                out[t] += cj * src[t];
            }
        }
    }
    out
}

/// Per-layer caches plus the next absolute position.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeCache<F> {
    pub layers: Vec<LayerCache<F>>,
    pub position: usize,
}

impl<F: Real> DecodeCache<F> {
    pub fn empty(cfgs: &[&AttnConfig]) -> Self {
        Self {
            layers: cfgs.iter().map(|c| LayerCache::new(c)).collect(),
            position: 0,
        }
    }
}
