//! The two-parameter induction loss with `α₂ = 1 − α₁`, `β₂ = 1 − β₁`:
//!
//! ```text
//! S  = e^{α₂} + 2e^{α₁} + ot,   a₁ = e^{α₁}/S,   a₂ = e^{α₂}/S
//! L  = −log( e^{t} / (e^{t} + 2e^{n₁} + e^{n₂} + ot) )
//! t  = a₂β₁ + β₂/S
//! n₁ = β₁/S + β₂a₂          (β₂a₁ for the in-text derivation)
//! n₂ = 2a₁β₁ + a₂β₂
//! ```

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::LogitVariant;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eq10Point {
    pub loss: f64,
    pub d_alpha1: f64,
    pub d_beta1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LandscapePoint {
    pub alpha1: f64,
    pub beta1: f64,
    pub ot: f64,
    pub variant: LogitVariant,
    pub loss: f64,
    pub dloss_dalpha1: f64,
    pub dloss_dbeta1: f64,
}

fn build(g: &mut Graph<f64>, a1: Var, b1: Var, ot: f64, variant: LogitVariant) -> Result<Var> {
    let one_minus = |g: &mut Graph<f64>, v: Var| {
        let n = g.scale(v, -1.0);
        g.add_scalar(n, 1.0)
    };
    let a2 = one_minus(g, a1);
    let b2 = one_minus(g, b1);
    let ea1 = g.exp(a1);
    let ea2 = g.exp(a2);
    let two_ea1 = g.scale(ea1, 2.0);
    let s0 = g.add(ea2, two_ea1)?;
    let s = g.add_scalar(s0, ot);
    let w1 = g.div(ea1, s)?;
    let w2 = g.div(ea2, s)?;
    let b1_s = g.div(b1, s)?;
    let b2_s = g.div(b2, s)?;
    let w2b1 = g.mul(w2, b1)?;
    let target = g.add(w2b1, b2_s)?;
    let mid = match variant {
        LogitVariant::AsPrinted => w2,
        LogitVariant::InTextDerivation => w1,
    };
    let b2w = g.mul(b2, mid)?;
    let no1 = g.add(b1_s, b2w)?;
    let w1b1 = g.mul(w1, b1)?;
    let w1b1x2 = g.scale(w1b1, 2.0);
    let w2b2 = g.mul(w2, b2)?;
    let no2 = g.add(w1b1x2, w2b2)?;
    let et = g.exp(target);
    let en1 = g.exp(no1);
    let en1x2 = g.scale(en1, 2.0);
    let en2 = g.exp(no2);
    let d0 = g.add(et, en1x2)?;
    let d1 = g.add(d0, en2)?;
    let den = g.add_scalar(d1, ot);
    let log_den = g.ln(den);
    g.sub(log_den, target)
}

/// Loss and `(∂L/∂α₁, ∂L/∂β₁)` by reverse-mode differentiation.
pub fn eq10_loss(alpha1: f64, beta1: f64, ot: f64, variant: LogitVariant) -> Result<Eq10Point> {
    if !(ot >= 0.0) {
        return Err(Error::config("ot must be non-negative"));
    }
    let mut g = Graph::new();
    let a = g.scalar(alpha1, true);
    let b = g.scalar(beta1, true);
    let loss = build(&mut g, a, b, ot, variant)?;
    g.backward(loss)?;
    Ok(Eq10Point {
        loss: g.scalar_value(loss),
        d_alpha1: g.grad(a).map_or(0.0, |v| v[0]),
        d_beta1: g.grad(b).map_or(0.0, |v| v[0]),
    })
}

/// `resolution²` points on the uniform grid over `[0,1]²`, β₁ outer.
pub fn landscape_grid(resolution: usize, ot: f64, variant: LogitVariant) -> Result<Vec<LandscapePoint>> {
    if resolution < 2 {
        return Err(Error::config("landscape resolution must be >= 2"));
    }
    let step = 1.0 / (resolution - 1) as f64;
    let mut out = Vec::with_capacity(resolution * resolution);
    for j in 0..resolution {
        for i in 0..resolution {
            let (a, b) = (i as f64 * step, j as f64 * step);
            let p = eq10_loss(a, b, ot, variant)?;
            out.push(LandscapePoint {
                alpha1: a,
                beta1: b,
                ot,
                variant,
                loss: p.loss,
                dloss_dalpha1: p.d_alpha1,
                dloss_dbeta1: p.d_beta1,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `(α₁, β₁, loss)` before each step, then the final point.
    pub points: Vec<(f64, f64, f64)>,
    pub diverged: bool,
}

/// Gradient descent on the loss. With `project` every iterate is clamped
/// to the unit square; without it the path leaves the square, where the
/// loss is unbounded below.
pub fn gd_trajectory(
    start: (f64, f64),
    ot: f64,
    step_size: f64,
    n_steps: usize,
    variant: LogitVariant,
    project: bool,
) -> Result<Trajectory> {
    let (mut a, mut b) = start;
    let mut points = Vec::with_capacity(n_steps + 1);
    for k in 0..=n_steps {
        let p = eq10_loss(a, b, ot, variant)?;
        if !p.loss.is_finite() || !p.d_alpha1.is_finite() || !p.d_beta1.is_finite() {
            return Ok(Trajectory { points, diverged: true });
        }
        points.push((a, b, p.loss));
        if k < n_steps {
            a -= step_size * p.d_alpha1;
            b -= step_size * p.d_beta1;
            if project {
                a = a.clamp(0.0, 1.0);
                b = b.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Trajectory { points, diverged: false })
}
