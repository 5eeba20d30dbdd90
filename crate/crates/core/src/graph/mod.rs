//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is also a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Leaf gradients accumulate across `backward` calls until
//! [`Graph::zero_grad`]; intermediate gradients are recomputed on each call.

mod attn;
mod nn;

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::mem;

use crate::error::{Error, Result};
use crate::real::{gemm_rm, Real};
use crate::tensor::Tensor;

pub use attn::{AttnGeometry, BlockMask, MaskBlock, SeqLayout};
pub(crate) use attn::attn_rope_row;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    Silu(Var),
    Square(Var),
    Sum(Var),
    Reshape(Var),
    SwiGlu { gate: Var, up: Var },
    Embedding { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, norm: F, probs: Vec<F> },
    GateCoeffs(Var),
    MixShift { x: Var, coeffs: Var, layout: Arc<SeqLayout>, heads: usize, head_dim: usize },
    Rope { x: Var, heads: usize, head_dim: usize, cos: Vec<F>, sin: Vec<F> },
    AttnScores { q: Var, k: Var, geom: Arc<AttnGeometry>, scale: F },
    MaskedSoftmax { s: Var, mask: Arc<BlockMask> },
    AttnApply { p: Var, v: Var, geom: Arc<AttnGeometry> },
}

pub(crate) struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Computation tape. One graph per logical thread.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf holding a copy of `t`'s data; it requires gradients iff `t` does.
    pub fn input(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    /// Records a leaf that requires gradients.
    pub fn param(&mut self, t: &Tensor<F>) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), true)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        check_len(shape, data.len())?;
        Ok(self.leaf(shape, data, false))
    }

    pub fn scalar(&mut self, value: F, requires_grad: bool) -> Var {
        self.leaf(&[], vec![value], requires_grad)
    }

    fn leaf(&mut self, shape: &[usize], value: Vec<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape: shape.to_vec(),
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, inputs: &[Var], op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` root w.r.t. `v` (accumulated for leaves).
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = n.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }

    // ---------------------------------------------------------------- ops

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` transpose the stored matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dims("matmul", sa, sb));
        }
        let (m, ka) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (kb, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if ka != kb {
            return Err(Error::dims("matmul", sa, sb));
        }
        let mut out = vec![F::zero(); m * n];
        gemm_rm(m, ka, n, self.value(a), ta, self.value(b), tb, &mut out, false);
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, ta, tb }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<F>, f: impl Fn(F, F) -> F) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let name = match op {
                Op::Add(..) => "add",
                Op::Sub(..) => "sub",
                Op::Mul(..) => "mul",
                _ => "div",
            };
            return Err(Error::dims(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn map(&mut self, a: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, &[a], op)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), |x| x.exp())
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map(a, Op::Ln(a), |x| x.ln())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.map(a, Op::Silu(a), |x| x * sigmoid(x))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(Vec::new(), vec![s], &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, F::one() / F::of(n as f64))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        check_len(shape, self.value(a).len())?;
        let v = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), v, &[a], Op::Reshape(a)))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::contract("backward root must be a scalar"));
        }
        for n in self.nodes[..=root.0].iter_mut() {
            if !n.requires_grad {
                continue;
            }
            let len = n.value.len();
            match (&n.op, n.grad.as_mut()) {
                (Op::Leaf, Some(_)) => {}
                (_, Some(g)) => g.iter_mut().for_each(|x| *x = F::zero()),
                (_, None) => n.grad = Some(vec![F::zero(); len]),
            }
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad.as_mut().expect("allocated")[0] += F::one();

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("allocated");
            let op = mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backward_op(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Runs `f` with the gradient buffer of `v` (if it requires grad) and
    /// read access to all node values.
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [F], &[Node<F>])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let mut g = self.nodes[v.0].grad.take().expect("allocated");
        f(&mut g, &self.nodes);
        self.nodes[v.0].grad = Some(g);
    }

    fn backward_op(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (m, n) = (self.nodes[i].shape[0], self.nodes[i].shape[1]);
                let sa = &self.nodes[a.0].shape;
                let k = if ta { sa[0] } else { sa[1] };
                self.acc(a, |ga, nodes| {
                    let bv = &nodes[b.0].value;
                    if ta {
                        gemm_rm(k, n, m, bv, tb, g, true, ga, true);
                    } else {
                        gemm_rm(m, n, k, g, false, bv, !tb, ga, true);
                    }
                });
                self.acc(b, |gb, nodes| {
                    let av = &nodes[a.0].value;
                    if tb {
                        gemm_rm(n, m, k, g, true, av, ta, gb, true);
                    } else {
                        gemm_rm(k, m, n, av, !ta, g, false, gb, true);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.acc(a, |ga, _| add_into(ga, g));
                self.acc(b, |gb, _| gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                self.acc(a, |ga, n| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(&n[b.0].value) {
                        *x += gy * bv;
                    }
                });
                self.acc(b, |gb, n| {
                    for ((x, &gy), &av) in gb.iter_mut().zip(g).zip(&n[a.0].value) {
                        *x += gy * av;
                    }
                });
            }
            Op::Div(a, b) => {
                self.acc(a, |ga, n| {
                    for ((x, &gy), &bv) in ga.iter_mut().zip(g).zip(&n[b.0].value) {
                        *x += gy / bv;
                    }
                });
                self.acc(b, |gb, n| {
                    let it = gb.iter_mut().zip(g).zip(&n[a.0].value).zip(&n[b.0].value);
                    for (((x, &gy), &av), &bv) in it {
                        *x -= gy * av / (bv * bv);
                    }
                });
            }
            Op::Scale(a, s) => self.acc(a, |ga, _| {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * s);
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(a, |ga, _| add_into(ga, g)),
            Op::Exp(a) => self.acc(a, |ga, n| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(&n[i].value) {
                    *x += gy * y;
                }
            }),
            Op::Ln(a) => self.acc(a, |ga, n| {
                for ((x, &gy), &av) in ga.iter_mut().zip(g).zip(&n[a.0].value) {
                    *x += gy / av;
                }
            }),
            Op::Sigmoid(a) => self.acc(a, |ga, n| {
                for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(&n[i].value) {
                    *x += gy * y * (F::one() - y);
                }
            }),
            Op::Silu(a) => self.acc(a, |ga, n| {
                for ((x, &gy), &av) in ga.iter_mut().zip(g).zip(&n[a.0].value) {
                    *x += gy * silu_grad(av);
                }
            }),
            Op::Square(a) => self.acc(a, |ga, n| {
                for ((x, &gy), &av) in ga.iter_mut().zip(g).zip(&n[a.0].value) {
                    *x += gy * (av + av);
                }
            }),
            Op::Sum(a) => self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x += g[0])),
            _ => self.backward_nn(i, op, g),
        }
    }
}

pub(crate) fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(Error::dims("shape", shape, &[len]));
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    dst.iter_mut().zip(src).for_each(|(x, &y)| *x += y);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let mut g = Graph::<f64>::new();
        let i = g.input(&Tensor::identity(2));
        let m = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_selector_row() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = g.constant(&[2, 1], vec![5.0, 7.0]).unwrap();
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(p), &[1, 1]);
        assert_eq!(g.value(p), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Dimension {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn square_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates_into_leaves() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(3.0));
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[12.0]);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_operand_gets_both_contributions() {
        // f = sum(x * x) → df/dx = 2x
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::new(&[2], vec![1.5, -2.0]).unwrap());
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, -4.0]);
    }
}
