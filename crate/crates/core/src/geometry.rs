//! Minimal lp-norms outside `B₁ ∪ B∞` and outside `conv(B₁ ∪ B∞)`.
//!
//! `B₁` is the l1-ball of radius `ε₁` and `B∞` the l∞-ball of radius `ε∞`,
//! both centered at the origin of `ℝᵈ`. The interesting regime is
//! `ε₁ ∈ (ε∞, d·ε∞)` where neither ball contains the other.
//!
//! Closed forms live next to independent brute-force checks:
//! [`hull_membership`] decides membership in the convex hull directly from
//! `conv(A ∪ B) = ⋃ₜ (tA + (1-t)B)` and [`hull_boundary_oracle`] searches the
//! hull boundary along random directions.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::norm::NormOrder;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallPair {
    pub eps1: f64,
    pub eps_inf: f64,
    pub dim: usize,
}

impl BallPair {
    pub fn new(eps1: f64, eps_inf: f64, dim: usize) -> Result<Self> {
        if !(eps1 > 0.0 && eps_inf > 0.0) || !eps1.is_finite() || !eps_inf.is_finite() {
            return Err(Error::domain(format!(
                "radii must be positive and finite (eps1={eps1}, eps_inf={eps_inf})"
            )));
        }
        if dim < 2 {
            return Err(Error::domain(format!("dimension must be >= 2, got {dim}")));
        }
        Ok(Self { eps1, eps_inf, dim })
    }

    /// `ε₁ ∈ (ε∞, d·ε∞)`: neither ball contains the other.
    pub fn is_nontrivial(&self) -> bool {
        self.eps1 > self.eps_inf && self.eps1 < self.dim as f64 * self.eps_inf
    }
}

/// `max{ε∞, ε₁ d^{(1-p)/p}}` from the standard norm inequalities.
pub fn naive_union_bound(bp: &BallPair, p: NormOrder) -> f64 {
    let d = bp.dim as f64;
    let l1_term = match p {
        NormOrder::Infinity => bp.eps1 / d,
        NormOrder::Finite(p) => bp.eps1 * d.powf((1.0 - p) / p),
    };
    bp.eps_inf.max(l1_term)
}

/// Exact `min ‖x‖_p` over `ℝᵈ \ (B₁ ∪ B∞)`.
///
/// Outside the nontrivial regime one ball contains the other and the value
/// is that of the larger ball.
pub fn union_min_norm(bp: &BallPair, p: NormOrder) -> f64 {
    let d = bp.dim as f64;
    let (e1, ei) = (bp.eps1, bp.eps_inf);
    if e1 <= ei {
        return ei;
    }
    if e1 >= d * ei {
        return match p {
            NormOrder::Infinity => e1 / d,
            NormOrder::Finite(p) => e1 * d.powf((1.0 - p) / p),
        };
    }
    match p {
        NormOrder::Infinity => ei,
        NormOrder::Finite(p) => {
            (ei.powf(p) + (e1 - ei).powf(p) / (d - 1.0).powf(p - 1.0)).powf(1.0 / p)
        }
    }
}

/// A point outside the union attaining [`union_min_norm`] for every finite `p`:
/// `(ε₁-ε∞)/(d-1)` on the first `d-1` coordinates and `ε∞` on the last.
pub fn union_witness(bp: &BallPair) -> Result<Array1<f64>> {
    if !(bp.eps1 > bp.eps_inf && bp.eps1 <= bp.dim as f64 * bp.eps_inf) {
        return Err(Error::domain(format!(
            "witness needs eps1 in (eps_inf, d*eps_inf]; got eps1={}, eps_inf={}, d={}",
            bp.eps1, bp.eps_inf, bp.dim
        )));
    }
    let mut v = Array1::from_elem(bp.dim, (bp.eps1 - bp.eps_inf) / (bp.dim - 1) as f64);
    v[bp.dim - 1] = bp.eps_inf;
    Ok(v)
}

/// Exact `min ‖x‖_p` over `ℝᵈ \ conv(B₁ ∪ B∞)`.
///
/// With `α = ε₁/ε∞ - ⌊ε₁/ε∞⌋` and `q` dual to `p` the value is
/// `ε₁ / (ε₁/ε∞ - α + α^q)^{1/q}`; it does not depend on `d`. For `p = 1`
/// it is `ε₁` and for `p = ∞` it is `ε∞`.
pub fn hull_min_norm(eps1: f64, eps_inf: f64, p: NormOrder) -> Result<f64> {
    if !(eps1 > 0.0 && eps_inf > 0.0) || !eps1.is_finite() || !eps_inf.is_finite() {
        return Err(Error::domain(format!(
            "radii must be positive and finite (eps1={eps1}, eps_inf={eps_inf})"
        )));
    }
    let q = match p.dual() {
        NormOrder::Infinity => return Ok(eps1),
        NormOrder::Finite(q) if q == 1.0 => return Ok(eps_inf),
        NormOrder::Finite(q) => q,
    };
    let ratio = eps1 / eps_inf;
    let whole = ratio.floor();
    let alpha = ratio - whole;
    Ok(eps1 / (whole + alpha.powf(q)).powf(1.0 / q))
}

/// Membership in `conv(B₁ ∪ B∞)` up to `tol`.
///
/// `x` is in the hull iff for some `t ∈ [0,1]`
/// `gap(t) = t·ε₁ - Σᵢ max(|xᵢ| - (1-t)ε∞, 0) ≥ 0`. The gap is concave and
/// piecewise linear in `t` with kinks at `t = 1 - |xᵢ|/ε∞`, so its maximum
/// is found by evaluating the endpoints and every kink.
pub fn hull_membership(x: &[f64], bp: &BallPair, tol: f64) -> bool {
    max_hull_gap(x, bp.eps1, bp.eps_inf) + tol >= 0.0
}

fn hull_gap(x: &[f64], eps1: f64, eps_inf: f64, t: f64) -> f64 {
    let r = (1.0 - t) * eps_inf;
    t * eps1 - x.iter().map(|v| (v.abs() - r).max(0.0)).sum::<f64>()
}

fn max_hull_gap(x: &[f64], eps1: f64, eps_inf: f64) -> f64 {
    let mut best = hull_gap(x, eps1, eps_inf, 0.0).max(hull_gap(x, eps1, eps_inf, 1.0));
    for v in x {
        let t = 1.0 - v.abs() / eps_inf;
        if t > 0.0 && t < 1.0 {
            best = best.max(hull_gap(x, eps1, eps_inf, t));
        }
    }
    best
}

/// Upper bound on [`hull_min_norm`] by random-direction boundary search.
///
/// For each random direction `u` (unit l2) the exit scale `s` of the hull is
/// bracketed by bisection on [`hull_membership`]; the outside end of the
/// bracket is kept, so every sample is a point outside the hull and the
/// minimum over samples converges from above.
pub fn hull_boundary_oracle(bp: &BallPair, p: NormOrder, num_dirs: usize, seed: u64) -> f64 {
    const CHUNK: usize = 1024;
    let chunks = num_dirs.div_ceil(CHUNK);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed, seed::purpose::GEOMETRY, c as u64);
            let n = CHUNK.min(num_dirs - c * CHUNK);
            let mut best = f64::INFINITY;
            let mut u = vec![0.0; bp.dim];
            let mut z = vec![0.0; bp.dim];
            for _ in 0..n {
                for ui in u.iter_mut() {
                    *ui = rng.sample(StandardNormal);
                }
                let len = NormOrder::TWO.norm(&u);
                if len == 0.0 {
                    continue;
                }
                u.iter_mut().for_each(|ui| *ui /= len);
                // every hull point has ‖·‖_∞ ≤ max(ε₁, ε∞), so this scale is outside
                let mut hi = bp.eps1.max(bp.eps_inf) * (bp.dim as f64).sqrt() * 1.01;
                let mut lo = 0.0;
                for _ in 0..64 {
                    let mid = 0.5 * (lo + hi);
                    z.iter_mut().zip(&u).for_each(|(zi, ui)| *zi = mid * ui);
                    if hull_membership(&z, bp, 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                z.iter_mut().zip(&u).for_each(|(zi, ui)| *zi = hi * ui);
                best = best.min(p.norm(&z));
            }
            best
        })
        .reduce(|| f64::INFINITY, f64::min)
}

/// Hull-to-union ratio of the minimal l2 norms as `δ = ε₁/ε∞` varies.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioAnalysis {
    /// Maximiser of the exact ratio `b_C/b_U` on the sweep.
    pub delta_star: f64,
    pub max_ratio: f64,
    /// Maximiser of `δ^{1/2}/b_U(δ)`, the smooth lower envelope of the ratio.
    pub envelope_delta_star: f64,
    pub curve: Vec<(f64, f64)>,
}

/// One row of the plot-ready comparison curves, with `ε∞ = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub delta: f64,
    pub naive: f64,
    pub union: f64,
    pub hull: f64,
    pub ratio: f64,
}

/// Sweeps `ε₁ = δ` over `samples` interior points of `(1, d)` with `ε∞ = 1`.
pub fn comparison_curves(d: usize, p: NormOrder, samples: usize) -> Result<Vec<CurvePoint>> {
    if d < 2 {
        return Err(Error::domain(format!("dimension must be >= 2, got {d}")));
    }
    let span = d as f64 - 1.0;
    (1..=samples)
        .map(|i| {
            let delta = 1.0 + span * i as f64 / (samples + 1) as f64;
            let bp = BallPair::new(delta, 1.0, d)?;
            let hull = hull_min_norm(delta, 1.0, p)?;
            let union = union_min_norm(&bp, p);
            Ok(CurvePoint {
                delta,
                naive: naive_union_bound(&bp, p),
                union,
                hull,
                ratio: hull / union,
            })
        })
        .collect()
}

pub const DEFAULT_RATIO_SAMPLES: usize = 200_000;

/// Ratio analysis for `p = 2`.
pub fn ratio_analysis(d: usize, samples: usize) -> Result<RatioAnalysis> {
    let curve = comparison_curves(d, NormOrder::TWO, samples)?;
    let best = curve
        .iter()
        .fold(None::<&CurvePoint>, |acc, c| match acc {
            Some(a) if a.ratio >= c.ratio => Some(a),
            _ => Some(c),
        })
        .ok_or_else(|| Error::domain("empty sweep"))?;
    let envelope = |c: &CurvePoint| c.delta.sqrt() / c.union;
    let env_best = curve
        .iter()
        .fold(None::<&CurvePoint>, |acc, c| match acc {
            Some(a) if envelope(a) >= envelope(c) => Some(a),
            _ => Some(c),
        })
        .expect("nonempty");
    Ok(RatioAnalysis {
        delta_star: best.delta,
        max_ratio: best.ratio,
        envelope_delta_star: env_best.delta,
        curve: curve.iter().map(|c| (c.delta, c.ratio)).collect(),
    })
}
