//! Prefill plus token-by-token decoding through the KV shifting cache.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::Model;
use crate::attention::{DecodeCache, LayerCache};
use crate::error::{Error, Result};
use crate::graph::{sigmoid, Graph, SeqLayout};
use crate::real::{gemm_rm, Real};

/// Decoding state of one sequence.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    pub cache: DecodeCache<F>,
}

fn rms_row<F: Real>(x: &[F], gain: &[F], eps: F) -> Vec<F> {
    let ms = x.iter().fold(F::zero(), |a, &v| a + v * v) / F::of(x.len() as f64);
    let s = F::one() / (ms + eps).sqrt();
    x.iter().zip(gain).map(|(&v, &g)| v * s * g).collect()
}

fn matvec<F: Real>(x: &[F], w: &[F], n: usize) -> Vec<F> {
    let mut y = vec![F::zero(); n];
    gemm_rm(1, x.len(), n, x, false, w, false, &mut y, false);
    y
}

impl<F: Real> Model<F> {
    /// Runs the full forward pass on `tokens` and returns its logits
    /// (`[len × V]`, row-major) together with a cache positioned after them.
    pub fn prefill(&self, tokens: &[usize]) -> Result<(Vec<F>, DecodeState<F>)> {
        let mut layers = Vec::with_capacity(self.layers.len());
        if tokens.is_empty() {
            let cache = DecodeCache::empty(&vec![&self.cfg.attn; self.layers.len()]);
            return Ok((Vec::new(), DecodeState { cache }));
        }
        let layout = Arc::new(SeqLayout::uniform(1, tokens.len()));
        let mut g = Graph::new();
        let vars = self.record(&mut g);
        let tr = self.forward(&mut g, &vars, tokens, &layout, None)?;
        for a in &tr.attn {
            layers.push(LayerCache::from_prefill(
                &self.cfg.attn,
                g.value(a.k_raw),
                g.value(a.v_raw),
                g.value(a.k_hat),
                g.value(a.v_hat),
            )?);
        }
        let cache = DecodeCache {
            layers,
            position: tokens.len(),
        };
        Ok((g.value(tr.logits).to_vec(), DecodeState { cache }))
    }

    /// Logits for the next position after feeding `token`.
    pub fn step(&self, state: &mut DecodeState<F>, token: usize) -> Result<Vec<F>> {
        let cfg = &self.cfg;
        if token >= cfg.vocab {
            return Err(Error::Input {
                position: state.cache.position,
                reason: alloc::format!("token id {token} >= vocab {}", cfg.vocab),
            });
        }
        if state.cache.layers.len() != self.layers.len() {
            return Err(Error::contract("decode cache layer count does not match the model"));
        }
        if state.cache.position >= cfg.max_len {
            return Err(Error::Input {
                position: state.cache.position,
                reason: alloc::format!("position exceeds max_len {}", cfg.max_len),
            });
        }
        let d = cfg.attn.hidden;
        let eps = F::of(cfg.norm_eps);
        let pos = state.cache.position;
        let mut x = self.embed.data()[token * d..(token + 1) * d].to_vec();
        for (l, cache) in self.layers.iter().zip(&mut state.cache.layers) {
            let n = rms_row(&x, l.attn_norm.data(), eps);
            let a = cache.attend(&cfg.attn, &l.shift, &l.attn, &n, pos)?;
            x.iter_mut().zip(&a).for_each(|(x, &a)| *x += a);
            if let Some(ffn) = &l.ffn {
                let n = rms_row(&x, l.ffn_norm.data(), eps);
                let gate = matvec(&n, ffn.w_gate.data(), cfg.ffn_hidden);
                let up = matvec(&n, ffn.w_up.data(), cfg.ffn_hidden);
                let act: Vec<F> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
                let down = matvec(&act, ffn.w_down.data(), d);
                x.iter_mut().zip(&down).for_each(|(x, &y)| *x += y);
            }
        }
        state.cache.position += 1;
        let n = rms_row(&x, self.final_norm.data(), eps);
        let mut logits = vec![F::zero(); cfg.vocab];
        match &self.head {
            Some(h) => gemm_rm(1, d, cfg.vocab, &n, false, h.data(), false, &mut logits, false),
            None => gemm_rm(1, d, cfg.vocab, &n, false, self.embed.data(), true, &mut logits, false),
        }
        Ok(logits)
    }
}
