//! Projected gradient attacks wrt l1, l2 and l∞ inside the box `[0, 1]^d`.
//!
//! Every returned adversarial point satisfies `‖z - x‖_p ≤ eps + 1e-9`,
//! lies in the box and is misclassified; the attack only ever gives lower
//! bounds on the robust error.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certify::{EpsTriple, ErrorBounds};
use crate::net::ReluNet;
use crate::norm::{sign, NormOrder};
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackNorm {
    L1,
    L2,
    Linf,
}

impl AttackNorm {
    pub const ALL: [AttackNorm; 3] = [AttackNorm::L1, AttackNorm::L2, AttackNorm::Linf];

    pub fn order(self) -> NormOrder {
        match self {
            AttackNorm::L1 => NormOrder::ONE,
            AttackNorm::L2 => NormOrder::TWO,
            AttackNorm::Linf => NormOrder::INF,
        }
    }

    pub fn norm(self, v: &Array1<f64>) -> f64 {
        self.order().norm(v)
    }

    fn index(self) -> usize {
        match self {
            AttackNorm::L1 => 0,
            AttackNorm::L2 => 1,
            AttackNorm::Linf => 2,
        }
    }

    fn eps(self, eps: &EpsTriple) -> f64 {
        match self {
            AttackNorm::L1 => eps.l1,
            AttackNorm::L2 => eps.l2,
            AttackNorm::Linf => eps.linf,
        }
    }
}

impl fmt::Display for AttackNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttackNorm::L1 => "l1",
            AttackNorm::L2 => "l2",
            AttackNorm::Linf => "linf",
        })
    }
}

impl FromStr for AttackNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l1" | "1" => Ok(AttackNorm::L1),
            "l2" | "2" => Ok(AttackNorm::L2),
            "linf" | "inf" => Ok(AttackNorm::Linf),
            other => Err(Error::input(format!("unknown attack norm '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub norm: AttackNorm,
    pub eps: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// `None` picks `2·eps/iterations` (l2, l∞) or `eps/4` (l1).
    pub step_size: Option<f64>,
    /// Fraction of coordinates moved by one l1 step.
    pub sparsity: f64,
    pub seed: u64,
}

impl PgdConfig {
    pub fn new(norm: AttackNorm, eps: f64) -> Self {
        Self {
            norm,
            eps,
            iterations: 100,
            restarts: 10,
            step_size: None,
            sparsity: 0.01,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.restarts == 0 {
            return Err(Error::domain("iterations and restarts must be positive"));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::domain("sparsity must be in (0, 1]"));
        }
        if self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::domain("eps must be nonnegative"));
        }
        if matches!(self.step_size, Some(s) if !(s > 0.0)) {
            return Err(Error::domain("step size must be positive"));
        }
        Ok(())
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(match self.norm {
            AttackNorm::L1 => self.eps / 4.0,
            _ => 2.0 * self.eps / self.iterations as f64,
        })
    }
}

/// Euclidean projection onto `{‖z‖_p ≤ eps}`.
pub fn project_lp_ball(v: ArrayView1<f64>, eps: f64, norm: AttackNorm) -> Array1<f64> {
    match norm {
        AttackNorm::Linf => v.mapv(|t| t.clamp(-eps, eps)),
        AttackNorm::L2 => {
            let n = NormOrder::TWO.norm(v);
            if n <= eps {
                v.to_owned()
            } else {
                v.mapv(|t| t * eps / n)
            }
        }
        AttackNorm::L1 => {
            if NormOrder::ONE.norm(v) <= eps {
                return v.to_owned();
            }
            let mut u: Vec<f64> = v.iter().map(|t| t.abs()).collect();
            u.sort_by(|a, b| b.total_cmp(a));
            let mut cum = 0.0;
            let mut theta = 0.0;
            for (j, &uj) in u.iter().enumerate() {
                cum += uj;
                let t = (cum - eps) / (j + 1) as f64;
                if uj > t {
                    theta = t;
                }
            }
            v.mapv(|t| sign(t) * (t.abs() - theta).max(0.0))
        }
    }
}

fn to_box(x: ArrayView1<f64>, delta: &Array1<f64>) -> Array1<f64> {
    let mut z = &x + delta;
    z.mapv_inplace(|t| t.clamp(0.0, 1.0));
    z - x
}

/// Alternates ball and box projections, then shrinks towards `x` if the
/// ball constraint is still violated. Shrinking keeps the box.
fn project_feasible(x: ArrayView1<f64>, delta: Array1<f64>, eps: f64, norm: AttackNorm) -> Array1<f64> {
    let mut d = delta;
    for _ in 0..10 {
        d = project_lp_ball(d.view(), eps, norm);
        d = to_box(x, &d);
    }
    let n = norm.norm(&d);
    if n > eps {
        d *= eps / n;
    }
    d
}

fn random_start(
    x: ArrayView1<f64>,
    eps: f64,
    norm: AttackNorm,
    rng: &mut impl Rng,
) -> Array1<f64> {
    let dim = x.len();
    let delta = match norm {
        AttackNorm::Linf => Array1::from_shape_fn(dim, |_| rng.random_range(-eps..=eps)),
        AttackNorm::L2 | AttackNorm::L1 => {
            let dir: Array1<f64> = if norm == AttackNorm::L2 {
                Array1::from_shape_fn(dim, |_| rng.sample(StandardNormal))
            } else {
                Array1::from_shape_fn(dim, |_| {
                    let e: f64 = rng.sample(Exp1);
                    if rng.random::<bool>() {
                        e
                    } else {
                        -e
                    }
                })
            };
            let n = norm.norm(&dir);
            let r = eps * rng.random::<f64>().powf(1.0 / dim as f64);
            if n > 0.0 {
                dir * (r / n)
            } else {
                dir
            }
        }
    };
    project_feasible(x, delta, eps, norm)
}

fn ascent_direction(grad: &Array1<f64>, norm: AttackNorm, sparsity: f64) -> Array1<f64> {
    match norm {
        AttackNorm::Linf => grad.mapv(sign),
        AttackNorm::L2 => {
            let n = NormOrder::TWO.norm(grad);
            if n > 0.0 {
                grad / n
            } else {
                Array1::zeros(grad.len())
            }
        }
        AttackNorm::L1 => {
            let dim = grad.len();
            let k = ((sparsity * dim as f64).ceil() as usize).clamp(1, dim);
            let mut idx: Vec<usize> = (0..dim).collect();
            idx.sort_by(|&a, &b| grad[b].abs().total_cmp(&grad[a].abs()));
            let mut dir = Array1::zeros(dim);
            let kept: Vec<usize> = idx[..k].iter().copied().filter(|&i| grad[i] != 0.0).collect();
            for &i in &kept {
                dir[i] = sign(grad[i]) / kept.len() as f64;
            }
            dir
        }
    }
}

fn ce_input_gradient(net: &ReluNet, z: ArrayView1<f64>, label: usize) -> Result<Array1<f64>> {
    let logits = net.logits(z)?;
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut p = logits.mapv(|f| (f - m).exp());
    let s = p.sum();
    p /= s;
    p[label] -= 1.0;
    net.input_gradient(z, p.view())
}

fn is_valid_adversarial(
    net: &ReluNet,
    x: ArrayView1<f64>,
    z: &Array1<f64>,
    label: usize,
    cfg: &PgdConfig,
) -> Result<bool> {
    let inside = z.iter().all(|t| (0.0..=1.0).contains(t));
    let close = cfg.norm.norm(&(z - &x)) <= cfg.eps + 1e-9;
    Ok(inside && close && net.classify(z.view())? != label)
}

/// PGD on the cross-entropy; returns the first adversarial point found.
pub fn pgd_attack(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    cfg: &PgdConfig,
) -> Result<Option<Array1<f64>>> {
    pgd_attack_from(net, x, label, cfg, None)
}

/// As [`pgd_attack`], first trying `warm_start` if it is feasible for
/// `cfg.eps`. Feeding the result at a smaller eps makes success monotone.
pub fn pgd_attack_from(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    cfg: &PgdConfig,
    warm_start: Option<&Array1<f64>>,
) -> Result<Option<Array1<f64>>> {
    cfg.validate()?;
    if x.len() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            found: x.len(),
        });
    }
    if label >= net.num_classes() {
        return Err(Error::input(format!("label {label} out of range")));
    }
    if cfg.eps == 0.0 {
        return Ok(None);
    }
    if let Some(z) = warm_start {
        if z.len() == x.len() && is_valid_adversarial(net, x, z, label, cfg)? {
            return Ok(Some(z.clone()));
        }
    }
    let eta = cfg.step();
    for r in 0..cfg.restarts {
        let mut delta = if r == 0 {
            Array1::zeros(x.len())
        } else {
            let mut rng = seed::rng(cfg.seed, seed::purpose::ATTACK, r as u64);
            random_start(x, cfg.eps, cfg.norm, &mut rng)
        };
        for _ in 0..=cfg.iterations {
            let z = &x + &delta;
            if net.classify(z.view())? != label && is_valid_adversarial(net, x, &z, label, cfg)? {
                return Ok(Some(z));
            }
            let grad = ce_input_gradient(net, z.view(), label)?;
            let dir = ascent_direction(&grad, cfg.norm, cfg.sparsity);
            delta = project_feasible(x, &delta + &(dir * eta), cfg.eps, cfg.norm);
        }
    }
    Ok(None)
}

/// Attack budget shared by the three norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackSettings {
    pub iterations: usize,
    pub restarts: usize,
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for AttackSettings {
    fn default() -> Self {
        Self {
            iterations: 100,
            restarts: 10,
            sparsity: 0.01,
            seed: 0,
        }
    }
}

impl AttackSettings {
    /// Configuration for point `index`; the restart streams depend only on
    /// the seed and the point, never on eps.
    pub fn config(&self, norm: AttackNorm, eps: f64, index: usize) -> PgdConfig {
        PgdConfig {
            norm,
            eps,
            iterations: self.iterations,
            restarts: self.restarts,
            step_size: None,
            sparsity: self.sparsity,
            seed: seed::derive(self.seed, seed::purpose::ATTACK, index as u64),
        }
    }
}

/// A successful perturbation and its norms `[l1, l2, l∞]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub delta: Vec<f64>,
    pub norms: [f64; 3],
}

impl Perturbation {
    fn new(delta: Array1<f64>) -> Self {
        let norms = [
            AttackNorm::L1.norm(&delta),
            AttackNorm::L2.norm(&delta),
            AttackNorm::Linf.norm(&delta),
        ];
        Self {
            delta: delta.to_vec(),
            norms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointAttack {
    pub label: usize,
    pub correct: bool,
    /// Indexed l1, l2, l∞; `None` when the attack failed or was not run.
    pub found: [Option<Perturbation>; 3],
}

impl PointAttack {
    /// Which of the three balls contain a misclassified point.
    pub fn broken(&self) -> [bool; 3] {
        [0, 1, 2].map(|i| !self.correct || self.found[i].is_some())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub bounds: ErrorBounds,
    pub points: Vec<PointAttack>,
}

/// Runs the attacks of `norms` on every correctly classified point.
pub fn attack_dataset(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    eps: &EpsTriple,
    norms: &[AttackNorm],
    settings: &AttackSettings,
) -> Result<Vec<PointAttack>> {
    if xs.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: xs.nrows(),
            found: labels.len(),
        });
    }
    (0..labels.len())
        .into_par_iter()
        .map(|i| {
            let x = xs.row(i);
            let label = labels[i];
            let correct = net.classify(x)? == label;
            let mut found: [Option<Perturbation>; 3] = [None, None, None];
            if correct {
                for &norm in norms {
                    let cfg = settings.config(norm, norm.eps(eps), i);
                    if let Some(z) = pgd_attack(net, x, label, &cfg)? {
                        found[norm.index()] = Some(Perturbation::new(z - &x));
                    }
                }
            }
            Ok(PointAttack {
                label,
                correct,
                found,
            })
        })
        .collect()
}

/// Fraction of points misclassified or broken by at least one attack.
pub fn robust_error_lower_bound(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    eps: &EpsTriple,
    settings: &AttackSettings,
) -> Result<LowerBound> {
    if labels.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let points = attack_dataset(net, xs, labels, eps, &AttackNorm::ALL, settings)?;
    let flags: Vec<[bool; 3]> = points.iter().map(PointAttack::broken).collect();
    Ok(LowerBound {
        bounds: ErrorBounds::from_flags(&flags),
        points,
    })
}

/// `hits[p][q]` of `total[p]` successful p-attacks also lie in the q-ball.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapStats {
    pub total: [usize; 3],
    pub hits: [[usize; 3]; 3],
}

impl OverlapStats {
    /// Percentage, or `None` for a 0-of-0 cell.
    pub fn percent(&self, p: AttackNorm, q: AttackNorm) -> Option<f64> {
        let t = self.total[p.index()];
        (t > 0).then(|| 100.0 * self.hits[p.index()][q.index()] as f64 / t as f64)
    }
}

pub fn overlap_stats(points: &[PointAttack], eps: &EpsTriple) -> OverlapStats {
    let mut total = [0; 3];
    let mut hits = [[0; 3]; 3];
    for pt in points {
        for p in AttackNorm::ALL {
            if let Some(pert) = &pt.found[p.index()] {
                total[p.index()] += 1;
                for q in AttackNorm::ALL {
                    if pert.norms[q.index()] <= q.eps(eps) {
                        hits[p.index()][q.index()] += 1;
                    }
                }
            }
        }
    }
    OverlapStats { total, hits }
}
