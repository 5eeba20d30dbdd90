//! Llama-style decoder: RMS pre-norm, (KV shifting) attention, SwiGLU FFN.
//!
//! ```text
//! h = x + Attn(RMSNorm(x))
//! x' = h + W_down (silu(RMSNorm(h) W_gate) ⊙ RMSNorm(h) W_up)
//! logits = RMSNorm(x_n) · E^T   (or a separate head)
//! ```

mod decode;

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::{
    init_shift_params, kv_shift_attention, AttnConfig, AttnSite, AttnTrace, AttnVars, AttnWeights, ShiftParams,
    ShiftSpec, ShiftVariant,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, SeqLayout, Var};
use crate::real::Real;
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use decode::DecodeState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub attn: AttnConfig,
    pub ffn_hidden: usize,
    pub ffn_enabled: bool,
    pub max_len: usize,
    pub tie_embeddings: bool,
    pub init_std: f64,
    pub norm_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::config("vocab must be at least 2"));
        }
        if self.layers == 0 {
            return Err(Error::config("layers must be at least 1"));
        }
        if self.ffn_hidden == 0 {
            return Err(Error::config("ffn_hidden must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(Error::config("max_len must be positive"));
        }
        if !(self.init_std >= 0.0) || !(self.norm_eps > 0.0) {
            return Err(Error::config("init_std must be >= 0 and norm_eps > 0"));
        }
        self.attn.validate()
    }

    /// Hidden 128, vocab 512, four heads.
    pub fn toy_depth(layers: usize, shift: ShiftSpec) -> Self {
        Self {
            vocab: 512,
            layers,
            attn: AttnConfig::new(128, 4, 4, shift),
            ffn_hidden: 352,
            ffn_enabled: true,
            max_len: 128,
            tie_embeddings: false,
            init_std: 0.02,
            norm_eps: 1e-6,
        }
    }

    /// The hidden-size-8 stress configuration (two heads, tied embeddings).
    pub fn toy_width(layers: usize, shift: ShiftSpec) -> Self {
        Self {
            attn: AttnConfig::new(8, 2, 2, shift),
            ffn_hidden: 24,
            tie_embeddings: true,
            ..Self::toy_depth(layers, shift)
        }
    }

    /// Hidden 1024, vocab 8000: one layer with FFN 5120, about 19.9M
    /// non-embedding parameters.
    pub fn paper_toy(shift: ShiftSpec) -> Self {
        Self {
            vocab: 8000,
            layers: 1,
            attn: AttnConfig::new(1024, 8, 8, shift),
            ffn_hidden: 5120,
            ffn_enabled: true,
            max_len: 512,
            tie_embeddings: false,
            init_std: 0.02,
            norm_eps: 1e-6,
        }
    }

    /// Hidden 64 two-layer model for the 3-gram task.
    pub fn ngram(layers: usize, shift: ShiftSpec) -> Self {
        Self {
            attn: AttnConfig::new(64, 4, 4, shift),
            ffn_hidden: 176,
            ..Self::toy_depth(layers, shift)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn<F> {
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F> {
    pub attn_norm: Tensor<F>,
    pub attn: AttnWeights<F>,
    pub shift: ShiftParams<F>,
    pub ffn_norm: Tensor<F>,
    pub ffn: Option<Ffn<F>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<F> {
    pub cfg: ModelConfig,
    pub embed: Tensor<F>,
    pub layers: Vec<Layer<F>>,
    pub final_norm: Tensor<F>,
    pub head: Option<Tensor<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Weight,
    Norm,
    Shift,
}

impl ParamKind {
    /// Norm gains and shift coefficients are exempt from weight decay.
    pub fn decays(self) -> bool {
        matches!(self, ParamKind::Embedding | ParamKind::Weight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub non_embedding: usize,
    pub shift_scalars: usize,
}

impl<F: Real> Model<F> {
    /// Fresh model: Normal(0, init_std²) weights, unit norm gains, shift
    /// coefficients from a per-layer derived stream so vanilla and shifted
    /// models built from one seed share every other weight.
    pub fn build(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let (d, std) = (cfg.attn.hidden, cfg.init_std);
        let shift_root = rng.derive(0x0053_4849_4654);
        let embed = Tensor::randn(&[cfg.vocab, d], std, rng);
        let mut layers = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            let attn = AttnWeights::init(&cfg.attn, std, rng);
            let ffn = cfg.ffn_enabled.then(|| Ffn {
                w_gate: Tensor::randn(&[d, cfg.ffn_hidden], std, rng),
                w_up: Tensor::randn(&[d, cfg.ffn_hidden], std, rng),
                w_down: Tensor::randn(&[cfg.ffn_hidden, d], std, rng),
            });
            let shift = init_shift_params(&cfg.attn, &mut shift_root.derive(i as u64));
            layers.push(Layer {
                attn_norm: Tensor::full(&[d], F::one()),
                attn,
                shift,
                ffn_norm: Tensor::full(&[d], F::one()),
                ffn,
            });
        }
        let head = (!cfg.tie_embeddings).then(|| Tensor::randn(&[d, cfg.vocab], std, rng));
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            layers,
            final_norm: Tensor::full(&[d], F::one()),
            head,
        })
    }

    /// Every parameter in declared (checkpoint) order.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor<F>)> {
        let mut out = vec![(String::from("embed"), ParamKind::Embedding, &self.embed)];
        for (i, l) in self.layers.iter().enumerate() {
            let mut f = |n: &str, k, t| out.push((format!("layers.{i}.{n}"), k, t));
            f("attn_norm", ParamKind::Norm, &l.attn_norm);
            f("attn.wq", ParamKind::Weight, &l.attn.wq);
            f("attn.wk", ParamKind::Weight, &l.attn.wk);
            f("attn.wv", ParamKind::Weight, &l.attn.wv);
            f("attn.wo", ParamKind::Weight, &l.attn.wo);
            if let Some(a) = &l.shift.alphas {
                f("shift.alphas", ParamKind::Shift, a);
            }
            if let Some(b) = &l.shift.betas {
                f("shift.betas", ParamKind::Shift, b);
            }
            f("ffn_norm", ParamKind::Norm, &l.ffn_norm);
            if let Some(ffn) = &l.ffn {
                f("ffn.w_gate", ParamKind::Weight, &ffn.w_gate);
                f("ffn.w_up", ParamKind::Weight, &ffn.w_up);
                f("ffn.w_down", ParamKind::Weight, &ffn.w_down);
            }
        }
        out.push((String::from("final_norm"), ParamKind::Norm, &self.final_norm));
        if let Some(h) = &self.head {
            out.push((String::from("head"), ParamKind::Weight, h));
        }
        out
    }

    /// Mutable parameters in the same order as [`Model::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out: Vec<&mut Tensor<F>> = vec![&mut self.embed];
        for l in &mut self.layers {
            out.push(&mut l.attn_norm);
            out.extend([&mut l.attn.wq, &mut l.attn.wk, &mut l.attn.wv, &mut l.attn.wo]);
            out.extend(l.shift.alphas.as_mut());
            out.extend(l.shift.betas.as_mut());
            out.push(&mut l.ffn_norm);
            if let Some(ffn) = &mut l.ffn {
                out.extend([&mut ffn.w_gate, &mut ffn.w_up, &mut ffn.w_down]);
            }
        }
        out.push(&mut self.final_norm);
        out.extend(self.head.as_mut());
        out
    }

    pub fn count_params(&self) -> ParamCount {
        let mut c = ParamCount {
            total: 0,
            non_embedding: 0,
            shift_scalars: 0,
        };
        for (name, kind, t) in self.params() {
            c.total += t.numel();
            if kind == ParamKind::Shift {
                c.shift_scalars += t.numel();
            }
            if kind != ParamKind::Embedding && name != "head" {
                c.non_embedding += t.numel();
            }
        }
        c
    }

    /// Re-applies the clamp constraint of every layer.
    pub fn constrain(&mut self) {
        self.layers
            .iter_mut()
            .for_each(|l| crate::attention::constrain_shift_params(&mut l.shift));
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            embed: self.embed.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    attn_norm: l.attn_norm.cast(),
                    attn: l.attn.cast(),
                    shift: ShiftParams {
                        window: l.shift.window,
                        variant: l.shift.variant,
                        alphas: l.shift.alphas.as_ref().map(Tensor::cast),
                        betas: l.shift.betas.as_ref().map(Tensor::cast),
                    },
                    ffn_norm: l.ffn_norm.cast(),
                    ffn: l.ffn.as_ref().map(|f| Ffn {
                        w_gate: f.w_gate.cast(),
                        w_up: f.w_up.cast(),
                        w_down: f.w_down.cast(),
                    }),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.as_ref().map(Tensor::cast),
        }
    }

    /// Records every parameter as a graph leaf.
    pub fn record(&self, g: &mut Graph<F>) -> ModelVars {
        let embed = g.param(&self.embed);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let attn_norm = g.param(&l.attn_norm);
                let attn = AttnVars::record(g, &l.attn, &l.shift);
                let ffn_norm = g.param(&l.ffn_norm);
                let ffn = l
                    .ffn
                    .as_ref()
                    .map(|f| [g.param(&f.w_gate), g.param(&f.w_up), g.param(&f.w_down)]);
                LayerVars {
                    attn_norm,
                    attn,
                    ffn_norm,
                    ffn,
                }
            })
            .collect();
        let final_norm = g.param(&self.final_norm);
        let head = self.head.as_ref().map(|h| g.param(h));
        ModelVars {
            embed,
            layers,
            final_norm,
            head,
        }
    }

    /// Forward pass over a packed batch. Logits are produced for `rows`
    /// (every row when `None`).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        vars: &ModelVars,
        tokens: &[usize],
        layout: &Arc<SeqLayout>,
        rows: Option<&[usize]>,
    ) -> Result<ForwardTrace> {
        if tokens.len() != layout.rows() {
            return Err(Error::dims("forward", &[tokens.len()], &[layout.rows()]));
        }
        if let Some(&(_, len)) = layout.segments().iter().find(|s| s.1 > self.cfg.max_len) {
            return Err(Error::Input {
                position: self.cfg.max_len,
                reason: format!("sequence length {len} exceeds max_len {}", self.cfg.max_len),
            });
        }
        let positions = layout.positions();
        let eps = F::of(self.cfg.norm_eps);
        let variant: ShiftVariant = self.cfg.attn.shift.variant;
        let mut x = g.embedding(vars.embed, tokens)?;
        let mut attn = Vec::with_capacity(self.layers.len());
        for (i, lv) in vars.layers.iter().enumerate() {
            let n = g.rms_norm(x, lv.attn_norm, eps)?;
            let tr = kv_shift_attention(
                g,
                n,
                &lv.attn,
                &self.cfg.attn,
                variant,
                layout,
                &positions,
                None,
                AttnSite { layer: i },
            )?;
            x = g.add(x, tr.out)?;
            attn.push(tr);
            if let Some([wg, wu, wd]) = lv.ffn {
                let n = g.rms_norm(x, lv.ffn_norm, eps)?;
                let gate = g.matmul(n, wg)?;
                let up = g.matmul(n, wu)?;
                let act = g.swiglu(gate, up)?;
                let down = g.matmul(act, wd)?;
                x = g.add(x, down)?;
            }
        }
        let hidden = x;
        let sel = match rows {
            Some(r) => g.select_rows(x, r)?,
            None => x,
        };
        let n = g.rms_norm(sel, vars.final_norm, eps)?;
        let logits = match vars.head {
            Some(h) => g.matmul(n, h)?,
            None => g.matmul_t(n, vars.embed, false, true)?,
        };
        Ok(ForwardTrace { logits, hidden, attn })
    }

    /// Causal logits `[B, L, V]` for a dense batch of equal-length sequences.
    pub fn forward_lm(&self, tokens: &[Vec<usize>]) -> Result<Tensor<F>> {
        let len = tokens.first().map_or(0, Vec::len);
        if tokens.iter().any(|t| t.len() != len) || len == 0 {
            return Err(Error::contract("forward_lm expects non-empty equal-length rows"));
        }
        let flat: Vec<usize> = tokens.concat();
        if let Some(p) = flat.iter().position(|&t| t >= self.cfg.vocab) {
            return Err(Error::Input {
                position: p % len,
                reason: format!("token id {} >= vocab {}", flat[p], self.cfg.vocab),
            });
        }
        let layout = Arc::new(SeqLayout::uniform(tokens.len(), len));
        let mut g = Graph::new();
        let vars = self.record(&mut g);
        let tr = self.forward(&mut g, &vars, &flat, &layout, None)?;
        g.tensor(tr.logits).reshape(&[tokens.len(), len, self.cfg.vocab])
    }
}

/// Graph handles of a recorded model, in parameter order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct LayerVars {
    pub attn_norm: Var,
    pub attn: AttnVars,
    pub ffn_norm: Var,
    pub ffn: Option<[Var; 3]>,
}

impl ModelVars {
    /// All handles in the order of [`Model::params`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.embed];
        for l in &self.layers {
            out.extend([l.attn_norm, l.attn.wq, l.attn.wk, l.attn.wv, l.attn.wo]);
            out.extend(l.attn.alphas);
            out.extend(l.attn.betas);
            out.push(l.ffn_norm);
            out.extend(l.ffn.iter().flatten().copied());
        }
        out.push(self.final_norm);
        out.extend(self.head);
        out
    }

    /// The same structure with every handle replaced by the entry of
    /// `leaves` at its position in [`ModelVars::all`].
    pub fn rebind(&self, leaves: &[Var]) -> Result<ModelVars> {
        let from = self.all();
        if leaves.len() != from.len() {
            return Err(Error::dims("ModelVars::rebind", &[from.len()], &[leaves.len()]));
        }
        let f = |v: Var| leaves[from.iter().position(|&x| x == v).expect("handle comes from all()")];
        Ok(ModelVars {
            embed: f(self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerVars {
                    attn_norm: f(l.attn_norm),
                    attn: AttnVars {
                        wq: f(l.attn.wq),
                        wk: f(l.attn.wk),
                        wv: f(l.attn.wv),
                        wo: f(l.attn.wo),
                        alphas: l.attn.alphas.map(f),
                        betas: l.attn.betas.map(f),
                    },
                    ffn_norm: f(l.ffn_norm),
                    ffn: l.ffn.map(|a| a.map(f)),
                })
                .collect(),
            final_norm: f(self.final_norm),
            head: self.head.map(f),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub logits: Var,
    pub hidden: Var,
    pub attn: Vec<AttnTrace>,
}

#[cfg(test)]
mod tests;
