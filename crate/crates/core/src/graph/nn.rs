//! Layers used by the transformer: embedding lookup, RMS normalisation,
//! gated activation, row selection and the cross-entropy objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{add_into, sigmoid, silu_grad, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::real::Real;

impl<F: Real> Graph<F> {
    /// Rows of `table` (shape `[V, D]`) selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::dims("embedding", shape, &[ids.len()]));
        }
        let (vocab, dim) = (shape[0], shape[1]);
        if let Some((pos, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(Error::Input {
                position: pos,
                reason: format!("token id {id} >= vocab {vocab}"),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            out.extend_from_slice(&tv[id * dim..(id + 1) * dim]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(vec![ids.len(), dim], out, &[table], op))
    }

    /// Rows `rows` of a 2-D node.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        if shape.len() != 2 || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::dims("select_rows", shape, &[rows.len()]));
        }
        let dim = shape[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * dim);
        for &r in rows {
            out.extend_from_slice(&xv[r * dim..(r + 1) * dim]);
        }
        let op = Op::SelectRows {
            x,
            rows: rows.to_vec(),
        };
        Ok(self.push(vec![rows.len(), dim], out, &[x], op))
    }

    /// `x / rms(x) * gain` per row, `rms = sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: F) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gain) != [d] {
            return Err(Error::dims("rms_norm", &shape, self.shape(gain)));
        }
        let (xv, gv) = (self.value(x), self.value(gain));
        let rows = xv.len() / d.max(1);
        let mut inv = Vec::with_capacity(rows);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let ms = row.iter().fold(F::zero(), |a, &v| a + v * v) / F::of(d as f64);
            let s = F::one() / (ms + eps).sqrt();
            inv.push(s);
            for ((o, &v), &gg) in out[r * d..(r + 1) * d].iter_mut().zip(row).zip(gv) {
                *o = v * s * gg;
            }
        }
        Ok(self.push(shape, out, &[x, gain], Op::RmsNorm { x, gain, inv }))
    }

    /// `silu(gate) * up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        if self.shape(gate) != self.shape(up) {
            return Err(Error::dims("swiglu", self.shape(gate), self.shape(up)));
        }
        let out = self
            .value(gate)
            .iter()
            .zip(self.value(up))
            .map(|(&a, &b)| a * sigmoid(a) * b)
            .collect();
        let shape = self.shape(gate).to_vec();
        Ok(self.push(shape, out, &[gate, up], Op::SwiGlu { gate, up }))
    }

    /// Mean negative log-likelihood of `targets` over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let count = targets.iter().filter(|t| t.is_some()).count();
        self.cross_entropy_sum(logits, targets, F::of(count as f64))
    }

    /// Sum of negative log-likelihoods over counted rows, divided by `norm`.
    ///
    /// Used to split one batch mean across several graphs.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        norm: F,
    ) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::dims("cross_entropy", shape, &[targets.len()]));
        }
        let v = shape[1];
        if targets.iter().all(|t| t.is_none()) {
            return Err(Error::contract("cross_entropy: empty position mask"));
        }
        if let Some((pos, t)) = targets
            .iter()
            .enumerate()
            .find_map(|(i, t)| t.filter(|&t| t >= v).map(|t| (i, t)))
        {
            return Err(Error::Input {
                position: pos,
                reason: format!("target {t} >= vocab {v}"),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut z = F::zero();
            let pr = &mut probs[r * v..(r + 1) * v];
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - m).exp();
                z += *p;
            }
            let inv = F::one() / z;
            pr.iter_mut().for_each(|p| *p *= inv);
            total += (m + z.ln() - row[t]).f64();
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            norm,
            probs,
        };
        Ok(self.push(Vec::new(), vec![F::of(total / norm.f64())], &[logits], op))
    }

    pub(super) fn backward_nn(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Embedding { table, ids } => {
                let dim = self.nodes[table.0].shape[1];
                self.acc(*table, |gt, _| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::SelectRows { x, rows } => {
                let dim = self.nodes[x.0].shape[1];
                self.acc(*x, |gx, _| {
                    for (r, &src) in rows.iter().enumerate() {
                        add_into(&mut gx[src * dim..(src + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::RmsNorm { x, gain, inv } => {
                let d = self.nodes[gain.0].shape[0];
                let (x, gain) = (*x, *gain);
                self.acc(x, |gx, n| {
                    let (xv, gv) = (&n[x.0].value, &n[gain.0].value);
                    for (r, &s) in inv.iter().enumerate() {
                        let row = &xv[r * d..(r + 1) * d];
                        let gy = &g[r * d..(r + 1) * d];
                        // dot = Σ gy·gain·x
                        let dot = row
                            .iter()
                            .zip(gy)
                            .zip(gv)
                            .fold(F::zero(), |a, ((&xv, &gy), &gg)| a + xv * gy * gg);
                        let c = dot * s * s * s / F::of(d as f64);
                        for (k, o) in gx[r * d..(r + 1) * d].iter_mut().enumerate() {
                            *o += gy[k] * gv[k] * s - row[k] * c;
                        }
                    }
                });
                self.acc(gain, |gg, n| {
                    let xv = &n[x.0].value;
                    for (r, &s) in inv.iter().enumerate() {
                        for k in 0..d {
                            gg[k] += g[r * d + k] * xv[r * d + k] * s;
                        }
                    }
                });
            }
            Op::SwiGlu { gate, up } => {
                let (gate, up) = (*gate, *up);
                self.acc(gate, |ga, n| {
                    let it = ga.iter_mut().zip(g).zip(&n[gate.0].value).zip(&n[up.0].value);
                    for (((o, &gy), &a), &b) in it {
                        *o += gy * b * silu_grad(a);
                    }
                });
                self.acc(up, |gu, n| {
                    for ((o, &gy), &a) in gu.iter_mut().zip(g).zip(&n[gate.0].value) {
                        *o += gy * a * sigmoid(a);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                norm,
                probs,
            } => {
                let v = self.nodes[logits.0].shape[1];
                let scale = g[0] / *norm;
                self.acc(*logits, |gl, _| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (o, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
            _ => self.backward_attn(i, op, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let v = 8000;
        let mut g = Graph::<f64>::new();
        let l = g.constant(&[1, v], vec![0.0; v]).unwrap();
        let ce = g.cross_entropy(l, &[Some(17)]).unwrap();
        let expected = (8000f64).ln();
        assert!((g.scalar_value(ce) - expected).abs() < 1e-12);
        assert!((expected - 8.9872).abs() < 1e-4);
    }

    #[test]
    fn saturated_logit_gives_near_zero_loss() {
        let mut g = Graph::<f64>::new();
        let mut row = vec![0.0; 10];
        row[3] = 30.0;
        let l = g.constant(&[1, 10], row).unwrap();
        let ce = g.cross_entropy(l, &[Some(3)]).unwrap();
        assert!(g.scalar_value(ce) <= 1e-9);
    }

    #[test]
    fn masked_position_is_ignored() {
        let mut g = Graph::<f64>::new();
        let l = g
            .constant(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 1.0, -4.0])
            .unwrap();
        let both = g.cross_entropy(l, &[Some(1), None]).unwrap();
        let l1 = g.constant(&[1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let single = g.cross_entropy(l1, &[Some(1)]).unwrap();
        assert_eq!(g.scalar_value(both), g.scalar_value(single));
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let mut g = Graph::<f64>::new();
        let l = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(
            g.cross_entropy(l, &[None, None]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_grad_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::new();
        let vals = vec![0.1, 0.7, -0.3, 1.2, 0.0, -2.0];
        let l = g.param(&Tensor::new(&[2, 3], vals.clone()).unwrap());
        let ce = g.cross_entropy(l, &[Some(2), Some(0)]).unwrap();
        g.backward(ce).unwrap();
        let grad = g.grad(l).unwrap();
        for r in 0..2 {
            let row = &vals[r * 3..r * 3 + 3];
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let t = [2, 0][r];
            for c in 0..3 {
                let p = row[c].exp() / z;
                let want = (p - if c == t { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad[r * 3 + c] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::<f32>::new();
        let t = g.param(&Tensor::zeros(&[4, 2]));
        let err = g.embedding(t, &[0, 3, 4]).unwrap_err();
        assert!(matches!(err, Error::Input { position: 2, .. }));
    }
}
