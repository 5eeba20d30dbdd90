//! Explicit weights that realise an induction head: one KV shifting layer,
//! or two vanilla layers.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::IhParams;
use crate::attention::{attention_core, AttnConfig, AttnSite, AttnWeights, PosEmb, ShiftParams, ShiftSpec, ShiftVariant};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout};
use crate::model::{Layer, Model, ModelConfig};
use crate::tensor::Tensor;

/// Mask for one `L × L` block: causal, with the last row limited to keys
/// `1..=L−2` (zero-based).
fn restrict_last_row(l: usize) -> Vec<bool> {
    let mut m = vec![true; l * l];
    for j in 0..l {
        m[(l - 1) * l + j] = (1..=l - 2).contains(&j);
    }
    m
}

/// One-layer, one-head KV shifting attention with `α = (0, 1)`,
/// `β = (1, 0)`, identity projections, score divisor σ and ALiBi slope m.
#[derive(Debug, Clone, PartialEq)]
pub struct KvsaIh {
    pub cfg: AttnConfig,
    pub weights: AttnWeights<f64>,
    pub shift: ShiftParams<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KvsaOutput {
    /// Output at the last position.
    pub out: Vec<f64>,
    /// Attention mass of the last query on the first and last positions.
    pub boundary_mass: f64,
}

impl KvsaIh {
    pub fn new(d: usize, p: &IhParams) -> Result<Self> {
        p.validate()?;
        let mut cfg = AttnConfig::new(d, 1, 1, ShiftSpec::KV_SHIFT);
        cfg.pos_emb = PosEmb::Alibi { slope: p.slope };
        cfg.scale = p.sigma;
        cfg.validate()?;
        let eye = Tensor::identity(d);
        Ok(Self {
            cfg,
            weights: AttnWeights {
                wq: eye.clone(),
                wk: eye.clone(),
                wv: eye.clone(),
                wo: eye,
            },
            shift: ShiftParams::fixed(1, [0.0, 1.0], [1.0, 0.0]),
        })
    }

    /// Evaluates the layer on `x: L × d`; `restricted` limits the last
    /// query to the keys the definition sums over.
    pub fn eval(&self, x: &Tensor<f64>, restricted: bool) -> Result<KvsaOutput> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.cfg.hidden || s[0] < 3 {
            return Err(Error::dims("kvsa_ih", s, &[3, self.cfg.hidden]));
        }
        let (l, d) = (s[0], s[1]);
        let mut g = Graph::new();
        let xv = g.input(x);
        let w = &self.weights;
        let (wq, wk, wv, wo) = (g.input(&w.wq), g.input(&w.wk), g.input(&w.wv), g.input(&w.wo));
        let q = g.matmul(xv, wq)?;
        let k = g.matmul(xv, wk)?;
        let v = g.matmul(xv, wv)?;
        let a = self.shift.alphas.as_ref().map(|t| g.input(t));
        let b = self.shift.betas.as_ref().map(|t| g.input(t));
        let layout = Arc::new(SeqLayout::uniform(1, l));
        let positions = layout.positions();
        let mask = restricted.then(|| vec![restrict_last_row(l)]);
        let tr = attention_core(
            &mut g,
            q,
            k,
            v,
            a,
            b,
            wo,
            &self.cfg,
            ShiftVariant::Free,
            &layout,
            &positions,
            mask,
            AttnSite::default(),
        )?;
        let out = g.value(tr.out)[(l - 1) * d..].to_vec();
        let probs = g.value(tr.probs);
        let last = &probs[(l - 1) * l..l * l];
        Ok(KvsaOutput {
            out,
            boundary_mass: last[0] + last[l - 1],
        })
    }
}

/// Two vanilla layers on a `2d`-wide residual stream `[x, y]`.
///
/// Layer 1 has zero queries and keys, ALiBi slope `p1` and a strictly
/// causal mask, so it writes `y_s ≈ x_{s−1}` into the second block. Layer 2
/// scores `x_L·y_s/σ − m|L−s|` and reads `x_s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerIh {
    pub d: usize,
    pub p1: f64,
    pub p: IhParams,
    pub layer1: AttnWeights<f64>,
    pub layer2: AttnWeights<f64>,
}

fn block(d: usize, from: usize, to: usize) -> Tensor<f64> {
    let n = 2 * d;
    Tensor::from_fn(&[n, n], |i| {
        let (r, c) = (i / n, i % n);
        f64::from(r >= from * d && r < (from + 1) * d && c == r - from * d + to * d)
    })
}

impl TwoLayerIh {
    pub fn new(p1: f64, p: &IhParams, d: usize) -> Result<Self> {
        p.validate()?;
        if !(p1 > 0.0) || d == 0 {
            return Err(Error::config("two-layer construction needs p1 > 0 and d >= 1"));
        }
        let zero = Tensor::zeros(&[2 * d, 2 * d]);
        Ok(Self {
            d,
            p1,
            p: *p,
            layer1: AttnWeights {
                wq: zero.clone(),
                wk: zero,
                wv: block(d, 0, 1),
                wo: Tensor::identity(2 * d),
            },
            layer2: AttnWeights {
                wq: block(d, 0, 0),
                wk: block(d, 1, 0),
                wv: block(d, 0, 0),
                wo: Tensor::identity(2 * d),
            },
        })
    }

    fn cfg(&self, slope: f64, scale: f64) -> AttnConfig {
        let mut c = AttnConfig::new(2 * self.d, 1, 1, ShiftSpec::VANILLA);
        c.pos_emb = PosEmb::Alibi { slope };
        c.scale = scale;
        c
    }

    fn layer(&self, g: &mut Graph<f64>, h: crate::graph::Var, w: &AttnWeights<f64>, cfg: &AttnConfig, mask: Vec<bool>, l: usize) -> Result<crate::graph::Var> {
        let (wq, wk, wv, wo) = (g.input(&w.wq), g.input(&w.wk), g.input(&w.wv), g.input(&w.wo));
        let q = g.matmul(h, wq)?;
        let k = g.matmul(h, wk)?;
        let v = g.matmul(h, wv)?;
        let layout = Arc::new(SeqLayout::uniform(1, l));
        let positions = layout.positions();
        let tr = attention_core(g, q, k, v, None, None, wo, cfg, ShiftVariant::Free, &layout, &positions, Some(vec![mask]), AttnSite::default())?;
        Ok(tr.out)
    }

    /// Residual stream after layer 1 (`L × 2d`).
    pub fn layer1_stream(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        let (l, _) = self.check(x)?;
        let mut g = Graph::new();
        let h0 = g.input(&self.embed(x));
        let mut mask = vec![false; l * l];
        mask[0] = true;
        for i in 1..l {
            (0..i).for_each(|j| mask[i * l + j] = true);
        }
        let a = self.layer(&mut g, h0, &self.layer1, &self.cfg(self.p1, 1.0), mask, l)?;
        let h1 = g.add(h0, a)?;
        Ok(g.value(h1).to_vec())
    }

    /// `max_s ‖y_s − x_{s−1}‖_∞` over `s ≥ 1` (zero-based).
    pub fn layer1_gap(&self, x: &Tensor<f64>) -> Result<f64> {
        let (l, d) = self.check(x)?;
        let h = self.layer1_stream(x)?;
        let mut worst = 0.0f64;
        for s in 1..l {
            for c in 0..d {
                worst = worst.max((h[s * 2 * d + d + c] - x.data()[(s - 1) * d + c]).abs());
            }
        }
        Ok(worst)
    }

    /// First `d` coordinates of the layer-2 attention output at the last
    /// position, with layer 2's support limited to `s ∈ [2, L−1]`.
    pub fn eval(&self, x: &Tensor<f64>) -> Result<Vec<f64>> {
        let (l, d) = self.check(x)?;
        let h1 = self.layer1_stream(x)?;
        let mut g = Graph::new();
        let h = g.constant(&[l, 2 * d], h1)?;
        let cfg = self.cfg(self.p.slope, self.p.sigma);
        let out = self.layer(&mut g, h, &self.layer2, &cfg, restrict_last_row(l), l)?;
        Ok(g.value(out)[(l - 1) * 2 * d..(l - 1) * 2 * d + d].to_vec())
    }

    fn check(&self, x: &Tensor<f64>) -> Result<(usize, usize)> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.d || s[0] < 3 {
            return Err(Error::dims("two_layer_ih", s, &[3, self.d]));
        }
        Ok((s[0], s[1]))
    }

    fn embed(&self, x: &Tensor<f64>) -> Tensor<f64> {
        let (l, d) = (x.shape()[0], self.d);
        Tensor::from_fn(&[l, 2 * d], |i| {
            let (r, c) = (i / (2 * d), i % (2 * d));
            if c < d {
                x.data()[r * d + c]
            } else {
                0.0
            }
        })
    }
}

/// A one-layer language model whose attention is the KV shifting
/// induction head over one-hot token embeddings.
///
/// Hidden size equals `vocab`, embeddings are the identity and tied, the FFN
/// is off, the attention norm gain undoes RMS scaling of a one-hot row, and
/// `W_O = 2I` so the copied successor outvotes the residual token.
pub fn ih_model(vocab: usize, max_len: usize, p: &IhParams) -> Result<Model<f32>> {
    let base = KvsaIh::new(vocab, p)?;
    let cfg = ModelConfig {
        vocab,
        layers: 1,
        attn: base.cfg.clone(),
        ffn_hidden: 1,
        ffn_enabled: false,
        max_len,
        tie_embeddings: true,
        init_std: 0.0,
        norm_eps: 1e-6,
    };
    cfg.validate()?;
    let gain = libm::sqrt(1.0 / vocab as f64 + cfg.norm_eps) as f32;
    let w = base.weights.cast::<f32>();
    let mut wo = w.wo.clone();
    wo.data_mut().iter_mut().for_each(|v| *v *= 2.0);
    Ok(Model {
        cfg,
        embed: Tensor::identity(vocab),
        layers: vec![Layer {
            attn_norm: Tensor::full(&[vocab], gain),
            attn: AttnWeights { wo, ..w },
            shift: ShiftParams::fixed(1, [0.0, 1.0], [1.0, 0.0]),
            ffn_norm: Tensor::full(&[vocab], 1.0),
            ffn: None,
        }],
        final_norm: Tensor::full(&[vocab], 1.0),
        head: None,
    })
}
