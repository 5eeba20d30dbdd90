//! Attention building blocks over packed variable-length sequences.
//!
//! Sequences of a batch are packed row-wise (`[N, heads * head_dim]` with
//! `N = Σ len`); a [`SeqLayout`] records where each sequence starts. Score and
//! probability tensors are packed per (sequence, head) block of `len × len`
//! entries, sequence-major.

use alloc::string::ToString;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{sigmoid, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Packed batch of sequences: `(start_row, len)` per sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    segments: Vec<(usize, usize)>,
    rows: usize,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut segments = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            segments.push((start, len));
            start += len;
        }
        Self {
            segments,
            rows: start,
        }
    }

    /// `batch` sequences of `len` rows each (the dense `B × L` case).
    pub fn uniform(batch: usize, len: usize) -> Self {
        Self::from_lengths(&vec![len; batch])
    }

    pub fn segments(&self) -> &[(usize, usize)] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Position of every row inside its sequence.
    pub fn positions(&self) -> Vec<usize> {
        let mut p = Vec::with_capacity(self.rows);
        for &(_, len) in &self.segments {
            p.extend(0..len);
        }
        p
    }
}

/// One `len × len` score block; entry `(i, j)` is visible iff `j <= i` and the
/// optional `allowed` matrix permits it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBlock {
    pub offset: usize,
    pub len: usize,
    pub allowed: Option<Arc<Vec<bool>>>,
}

impl MaskBlock {
    #[inline]
    pub fn visible(&self, i: usize, j: usize) -> bool {
        j <= i && self.allowed.as_ref().is_none_or(|a| a[i * self.len + j])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockMask {
    pub blocks: Vec<MaskBlock>,
    pub total: usize,
}

impl BlockMask {
    /// Plain causal masks for a dense `[groups, len, len]` score tensor.
    pub fn causal(groups: usize, len: usize) -> Self {
        let blocks = (0..groups)
            .map(|g| MaskBlock {
                offset: g * len * len,
                len,
                allowed: None,
            })
            .collect();
        Self {
            blocks,
            total: groups * len * len,
        }
    }

    /// Causal masks further restricted by a shared `allowed` matrix.
    pub fn restricted(groups: usize, len: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != len * len {
            return Err(Error::dims("mask", &[len, len], &[allowed.len()]));
        }
        let mut m = Self::causal(groups, len);
        let shared = Arc::new(allowed);
        m.blocks
            .iter_mut()
            .for_each(|b| b.allowed = Some(shared.clone()));
        Ok(m)
    }
}

/// Shape of one multi-head attention evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGeometry {
    pub layout: SeqLayout,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    /// ALiBi slope `m`; scores receive `-m * (i - j)`.
    pub alibi_slope: f64,
    pub mask: BlockMask,
}

impl AttnGeometry {
    /// `extra` optionally restricts each sequence's causal mask (one
    /// `len × len` matrix per sequence, shared by all heads).
    pub fn new(
        layout: SeqLayout,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
        alibi_slope: f64,
        extra: Option<Vec<Vec<bool>>>,
    ) -> Result<Self> {
        if kv_heads == 0 || !heads.is_multiple_of(kv_heads) {
            return Err(Error::config("heads must be a multiple of kv_heads"));
        }
        if let Some(e) = &extra {
            if e.len() != layout.segments.len() {
                return Err(Error::dims(
                    "attention mask",
                    &[layout.segments.len()],
                    &[e.len()],
                ));
            }
        }
        let mut blocks = Vec::with_capacity(layout.segments.len() * heads);
        let mut offset = 0;
        for (s, &(_, len)) in layout.segments.iter().enumerate() {
            let allowed = match &extra {
                Some(e) => {
                    if e[s].len() != len * len {
                        return Err(Error::dims("attention mask", &[len, len], &[e[s].len()]));
                    }
                    Some(Arc::new(e[s].clone()))
                }
                None => None,
            };
            for _ in 0..heads {
                blocks.push(MaskBlock {
                    offset,
                    len,
                    allowed: allowed.clone(),
                });
                offset += len * len;
            }
        }
        Ok(Self {
            layout,
            heads,
            kv_heads,
            head_dim,
            alibi_slope,
            mask: BlockMask {
                blocks,
                total: offset,
            },
        })
    }

    fn group(&self) -> usize {
        self.heads / self.kv_heads
    }
}

impl<F: Real> Graph<F> {
    /// Per-head causal mixing over the sequence axis:
    /// `out[t,h] = Σ_j coeffs[h,j] · x[t-j,h]`, rows before a sequence start
    /// count as zero. `x` is `[N, heads * head_dim]`, `coeffs` is `[heads, w+1]`.
    pub fn mix_shift(
        &mut self,
        x: Var,
        coeffs: Var,
        layout: &Arc<SeqLayout>,
        heads: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = self.shape(coeffs).to_vec();
        if xs.len() != 2 || xs[0] != layout.rows || heads == 0 || !xs[1].is_multiple_of(heads) {
            return Err(Error::dims("mix_shift", &xs, &[layout.rows, heads]));
        }
        if cs.len() != 2 || cs[0] != heads || cs[1] == 0 {
            return Err(Error::contract("mix_shift: coefficient count mismatch"));
        }
        let head_dim = xs[1] / heads;
        let taps = cs[1];
        let width = xs[1];
        let (xv, cv) = (self.value(x), self.value(coeffs));
        let mut out = vec![F::zero(); xv.len()];
        for &(start, len) in layout.segments() {
            for t in 0..len {
                let orow = (start + t) * width;
                for j in 0..taps.min(t + 1) {
                    let irow = (start + t - j) * width;
                    for h in 0..heads {
                        let c = cv[h * taps + j];
                        let o = &mut out[orow + h * head_dim..orow + (h + 1) * head_dim];
                        let i = &xv[irow + h * head_dim..irow + (h + 1) * head_dim];
                        o.iter_mut().zip(i).for_each(|(o, &v)| *o += c * v);
                    }
                }
            }
        }
        let op = Op::MixShift {
            x,
            coeffs,
            layout: layout.clone(),
            heads,
            head_dim,
        };
        Ok(self.push(xs, out, &[x, coeffs], op))
    }

    /// `[heads]` raw gates → `[heads, 2]` coefficients `(σ(a), 1 - σ(a))`.
    pub fn gate_coeffs(&mut self, raw: Var) -> Result<Var> {
        let s = self.shape(raw);
        if s.len() != 1 {
            return Err(Error::dims("gate_coeffs", s, &[]));
        }
        let h = s[0];
        let mut out = Vec::with_capacity(2 * h);
        for &a in self.value(raw) {
            let p = sigmoid(a);
            out.push(p);
            out.push(F::one() - p);
        }
        Ok(self.push(vec![h, 2], out, &[raw], Op::GateCoeffs(raw)))
    }

    /// Rotary embedding (half-split pairing) at the given absolute positions.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, base: f64) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || xs[0] != positions.len() || heads == 0 || !xs[1].is_multiple_of(heads) {
            return Err(Error::dims("rope", &xs, &[positions.len(), heads]));
        }
        let head_dim = xs[1] / heads;
        if !head_dim.is_multiple_of(2) {
            return Err(Error::config("rope needs an even head_dim"));
        }
        let (cos, sin) = rope_tables::<F>(positions, head_dim, base);
        let half = head_dim / 2;
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for (r, _) in positions.iter().enumerate() {
            let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
            for h in 0..heads {
                let base_ix = r * xs[1] + h * head_dim;
                for k in 0..half {
                    let (a, b) = (xv[base_ix + k], xv[base_ix + k + half]);
                    out[base_ix + k] = a * c[k] - b * s[k];
                    out[base_ix + k + half] = a * s[k] + b * c[k];
                }
            }
        }
        let op = Op::Rope {
            x,
            heads,
            head_dim,
            cos,
            sin,
        };
        Ok(self.push(xs, out, &[x], op))
    }

    /// Packed causal scores `q_i · k_j / scale - m (i - j)` for every
    /// (sequence, query head) block. Masked entries hold zero.
    pub fn attn_scores(&mut self, q: Var, k: Var, geom: &Arc<AttnGeometry>, scale: F) -> Result<Var> {
        let g = geom.as_ref();
        let qs = self.shape(q);
        let ks = self.shape(k);
        if qs != [g.layout.rows, g.heads * g.head_dim] || ks != [g.layout.rows, g.kv_heads * g.head_dim]
        {
            return Err(Error::dims("attn_scores", qs, ks));
        }
        let (qv, kv) = (self.value(q), self.value(k));
        let (dh, qw, kw) = (g.head_dim, g.heads * g.head_dim, g.kv_heads * g.head_dim);
        let inv = F::one() / scale;
        let slope = F::of(g.alibi_slope);
        let mut out = vec![F::zero(); g.mask.total];
        let mut b = 0;
        for &(start, len) in g.layout.segments() {
            for h in 0..g.heads {
                let blk = &g.mask.blocks[b];
                let kh = h / g.group();
                for i in 0..len {
                    let qi = &qv[(start + i) * qw + h * dh..(start + i) * qw + (h + 1) * dh];
                    for j in 0..=i {
                        if !blk.visible(i, j) {
                            continue;
                        }
                        let kj = &kv[(start + j) * kw + kh * dh..(start + j) * kw + (kh + 1) * dh];
                        let dot = qi.iter().zip(kj).fold(F::zero(), |a, (&x, &y)| a + x * y);
                        out[blk.offset + i * len + j] = dot * inv - slope * F::of((i - j) as f64);
                    }
                }
                b += 1;
            }
        }
        let op = Op::AttnScores {
            q,
            k,
            geom: geom.clone(),
            scale,
        };
        Ok(self.push(vec![g.mask.total], out, &[q, k], op))
    }

    /// Row-wise softmax over the visible entries of each block, with row-max
    /// subtraction; masked entries are exactly zero.
    pub fn masked_softmax(&mut self, s: Var, mask: &Arc<BlockMask>) -> Result<Var> {
        if self.value(s).len() != mask.total {
            return Err(Error::dims("masked_softmax", self.shape(s), &[mask.total]));
        }
        let sv = self.value(s);
        let mut out = vec![F::zero(); sv.len()];
        let floor = F::of(1e-30);
        for blk in &mask.blocks {
            let len = blk.len;
            for i in 0..len {
                let row = blk.offset + i * len;
                let mut m = F::neg_infinity();
                for j in 0..=i {
                    if blk.visible(i, j) {
                        m = m.max(sv[row + j]);
                    }
                }
                if m == F::neg_infinity() {
                    return Err(Error::Contract(
                        "masked_softmax: fully masked row".to_string(),
                    ));
                }
                let mut z = F::zero();
                for j in 0..=i {
                    if blk.visible(i, j) {
                        let e = (sv[row + j] - m).exp();
                        out[row + j] = e;
                        z += e;
                    }
                }
                let inv = F::one() / z.max(floor);
                out[row..row + i + 1].iter_mut().for_each(|p| *p *= inv);
            }
        }
        let shape = self.shape(s).to_vec();
        let op = Op::MaskedSoftmax {
            s,
            mask: mask.clone(),
        };
        Ok(self.push(shape, out, &[s], op))
    }

    /// `out_i = Σ_j p_ij v_j` per head → `[N, heads * head_dim]`.
    pub fn attn_apply(&mut self, p: Var, v: Var, geom: &Arc<AttnGeometry>) -> Result<Var> {
        let g = geom.as_ref();
        let vs = self.shape(v);
        if self.value(p).len() != g.mask.total || vs != [g.layout.rows, g.kv_heads * g.head_dim] {
            return Err(Error::dims("attn_apply", self.shape(p), vs));
        }
        let (pv, vv) = (self.value(p), self.value(v));
        let (dh, qw, kw) = (g.head_dim, g.heads * g.head_dim, g.kv_heads * g.head_dim);
        let mut out = vec![F::zero(); g.layout.rows * qw];
        let mut b = 0;
        for &(start, len) in g.layout.segments() {
            for h in 0..g.heads {
                let blk = &g.mask.blocks[b];
                let kh = h / g.group();
                for i in 0..len {
                    let o0 = (start + i) * qw + h * dh;
                    for j in 0..=i {
                        let w = pv[blk.offset + i * len + j];
                        if w == F::zero() {
                            continue;
                        }
                        let vj = &vv[(start + j) * kw + kh * dh..(start + j) * kw + (kh + 1) * dh];
                        out[o0..o0 + dh]
                            .iter_mut()
                            .zip(vj)
                            .for_each(|(o, &x)| *o += w * x);
                    }
                }
                b += 1;
            }
        }
        let op = Op::AttnApply {
            p,
            v,
            geom: geom.clone(),
        };
        Ok(self.push(vec![g.layout.rows, qw], out, &[p, v], op))
    }

    pub(super) fn backward_attn(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::GateCoeffs(raw) => self.acc(*raw, |ga, n| {
                let y = &n[i].value;
                for (h, o) in ga.iter_mut().enumerate() {
                    let p = y[2 * h];
                    *o += (g[2 * h] - g[2 * h + 1]) * p * (F::one() - p);
                }
            }),
            Op::MixShift {
                x,
                coeffs,
                layout,
                heads,
                head_dim,
            } => {
                let (x, coeffs, heads, dh) = (*x, *coeffs, *heads, *head_dim);
                let width = heads * dh;
                let taps = self.nodes[coeffs.0].shape[1];
                self.acc(x, |gx, n| {
                    let cv = &n[coeffs.0].value;
                    for &(start, len) in layout.segments() {
                        for t in 0..len {
                            for j in 0..taps.min(t + 1) {
                                for h in 0..heads {
                                    let c = cv[h * taps + j];
                                    let src = (start + t) * width + h * dh;
                                    let dst = (start + t - j) * width + h * dh;
                                    for k in 0..dh {
                                        gx[dst + k] += c * g[src + k];
                                    }
                                }
                            }
                        }
                    }
                });
                self.acc(coeffs, |gc, n| {
                    let xv = &n[x.0].value;
                    for &(start, len) in layout.segments() {
                        for t in 0..len {
                            for j in 0..taps.min(t + 1) {
                                for h in 0..heads {
                                    let go = (start + t) * width + h * dh;
                                    let xi = (start + t - j) * width + h * dh;
                                    let dot = (0..dh).fold(F::zero(), |a, k| a + g[go + k] * xv[xi + k]);
                                    gc[h * taps + j] += dot;
                                }
                            }
                        }
                    }
                });
            }
            Op::Rope {
                x,
                heads,
                head_dim,
                cos,
                sin,
            } => {
                let (heads, dh) = (*heads, *head_dim);
                let half = dh / 2;
                let width = heads * dh;
                self.acc(*x, |gx, _| {
                    let rows = gx.len() / width;
                    for r in 0..rows {
                        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
                        for h in 0..heads {
                            let b = r * width + h * dh;
                            for k in 0..half {
                                let (g1, g2) = (g[b + k], g[b + k + half]);
                                gx[b + k] += g1 * c[k] + g2 * s[k];
                                gx[b + k + half] += g2 * c[k] - g1 * s[k];
                            }
                        }
                    }
                });
            }
            Op::AttnScores { q, k, geom, scale } => {
                let gm = geom.as_ref();
                let (q, k) = (*q, *k);
                let (dh, qw, kw) = (gm.head_dim, gm.heads * gm.head_dim, gm.kv_heads * gm.head_dim);
                let inv = F::one() / *scale;
                self.acc(q, |gq, n| {
                    let kv = &n[k.0].value;
                    for_each_visible(gm, |start, len, h, blk, ii, j| {
                        let gs = g[blk.offset + ii * len + j] * inv;
                        if gs == F::zero() {
                            return;
                        }
                        let kh = h / gm.group();
                        let qo = (start + ii) * qw + h * dh;
                        let ko = (start + j) * kw + kh * dh;
                        for t in 0..dh {
                            gq[qo + t] += gs * kv[ko + t];
                        }
                    });
                });
                self.acc(k, |gk, n| {
                    let qv = &n[q.0].value;
                    for_each_visible(gm, |start, len, h, blk, ii, j| {
                        let gs = g[blk.offset + ii * len + j] * inv;
                        if gs == F::zero() {
                            return;
                        }
                        let kh = h / gm.group();
                        let qo = (start + ii) * qw + h * dh;
                        let ko = (start + j) * kw + kh * dh;
                        for t in 0..dh {
                            gk[ko + t] += gs * qv[qo + t];
                        }
                    });
                });
            }
            Op::MaskedSoftmax { s, mask } => self.acc(*s, |gs, n| {
                let p = &n[i].value;
                for blk in &mask.blocks {
                    let len = blk.len;
                    for r in 0..len {
                        let row = blk.offset + r * len;
                        let dot = (0..=r).fold(F::zero(), |a, j| a + p[row + j] * g[row + j]);
                        for j in 0..=r {
                            if blk.visible(r, j) {
                                gs[row + j] += p[row + j] * (g[row + j] - dot);
                            }
                        }
                    }
                }
            }),
            Op::AttnApply { p, v, geom } => {
                let gm = geom.as_ref();
                let (p, v) = (*p, *v);
                let (dh, qw, kw) = (gm.head_dim, gm.heads * gm.head_dim, gm.kv_heads * gm.head_dim);
                self.acc(p, |gp, n| {
                    let vv = &n[v.0].value;
                    for_each_visible(gm, |start, len, h, blk, ii, j| {
                        let kh = h / gm.group();
                        let go = (start + ii) * qw + h * dh;
                        let vo = (start + j) * kw + kh * dh;
                        let dot = (0..dh).fold(F::zero(), |a, t| a + g[go + t] * vv[vo + t]);
                        gp[blk.offset + ii * len + j] += dot;
                    });
                });
                self.acc(v, |gv, n| {
                    let pv = &n[p.0].value;
                    for_each_visible(gm, |start, len, h, blk, ii, j| {
                        let w = pv[blk.offset + ii * len + j];
                        if w == F::zero() {
                            return;
                        }
                        let kh = h / gm.group();
                        let go = (start + ii) * qw + h * dh;
                        let vo = (start + j) * kw + kh * dh;
                        add_scaled(&mut gv[vo..vo + dh], &g[go..go + dh], w);
                    });
                });
            }
            _ => unreachable!("non-attention op routed to backward_attn"),
        }
    }
}

fn for_each_visible(
    g: &AttnGeometry,
    mut f: impl FnMut(usize, usize, usize, &MaskBlock, usize, usize),
) {
    let mut b = 0;
    for &(start, len) in g.layout.segments() {
        for h in 0..g.heads {
            let blk = &g.mask.blocks[b];
            for i in 0..len {
                for j in 0..=i {
                    if blk.visible(i, j) {
                        f(start, len, h, blk, i, j);
                    }
                }
            }
            b += 1;
        }
    }
}

#[inline]
fn add_scaled<F: Real>(dst: &mut [F], src: &[F], w: F) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += w * s);
}

/// Per-row cos/sin tables, `half = head_dim / 2` entries per row.
pub(crate) fn rope_tables<F: Real>(positions: &[usize], head_dim: usize, base: f64) -> (Vec<F>, Vec<F>) {
    let half = head_dim / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for k in 0..half {
            let freq = libm::pow(base, -(2.0 * k as f64) / head_dim as f64);
            let theta = p as f64 * freq;
            cos.push(F::of(libm::cos(theta)));
            sin.push(F::of(libm::sin(theta)));
        }
    }
    (cos, sin)
}

/// Rotates one packed row in place (decode path; same convention as [`Graph::rope`]).
pub(crate) fn attn_rope_row<F: Real>(x: &mut [F], position: usize, heads: usize, head_dim: usize, base: f64) {
    let (cos, sin) = rope_tables::<F>(&[position], head_dim, base);
    let half = head_dim / 2;
    for h in 0..heads {
        let b = h * head_dim;
        for k in 0..half {
            let (a, c) = (x[b + k], x[b + k + half]);
            x[b + k] = a * cos[k] - c * sin[k];
            x[b + k + half] = a * sin[k] + c * cos[k];
        }
    }
}
