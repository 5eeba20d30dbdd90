//! Central finite-difference gradient checks (verify64 only).

use alloc::vec::Vec;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |a - n| / max(|a|, |n|, 1e-8)` over all checked elements.
    pub max_rel_error: f64,
    /// Index of the parameter holding the worst element.
    pub worst_param: usize,
    pub worst_element: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+h) - f(θ-h)) / 2h` for every element of every parameter.
pub fn grad_check<B>(build: B, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.input(p)).collect();
        let root = build(&mut g, &vars)?;
        Ok(g.scalar_value(root))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_element: 0,
        checked: 0,
        passed: true,
    };
    for (pi, p) in params.iter().enumerate() {
        for e in 0..p.numel() {
            let orig = p.data()[e];
            work[pi].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].get(e).copied().unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_element = e;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
