//! Upper bounds on the true robustness radius `r_p(x)` by search.
//!
//! Two searches are combined and every candidate is an actual point where
//! some class `s ≠ c` reaches `f_s ≥ f_c`, re-checked with a forward pass:
//!
//! - rays from `x` along axis and random directions, bisected onto the first
//!   decision change;
//! - for 2D inputs, an exhaustive best-first walk over linear regions. Each
//!   region is clipped to a polygon; inside it the adversarial set for class
//!   `s` is one more halfplane, and the lp distance from `x` to the clipped
//!   polygon is computed exactly. Regions are visited by increasing distance
//!   from `x` and the walk stops once the nearest unvisited region is farther
//!   than the best adversarial point found.
//!
//! Certificates must never exceed the value returned here. The search is
//! meant for tiny networks (tens of hidden units).

use std::collections::HashSet;

use ndarray::{Array1, ArrayView1};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::net::{ActivationPattern, RegionDescription, ReluNet};
use crate::norm::NormOrder;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleBudget {
    /// Random ray directions on top of the `2d` axis directions.
    pub directions: usize,
    pub ray_steps: usize,
    /// Rays and the region walk stay within this l∞ radius of `x`.
    pub max_radius: f64,
    pub max_regions: usize,
    pub seed: u64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        Self {
            directions: 16,
            ray_steps: 64,
            max_radius: 4.0,
            max_regions: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// `‖witness - x‖_p`, or `+∞` if nothing was found in range.
    pub bound: f64,
    pub witness: Option<Array1<f64>>,
    /// The region walk hit `max_regions` before it could stop on its own.
    pub exhausted: bool,
}

fn is_adversarial(net: &ReluNet, z: ArrayView1<f64>, label: usize) -> bool {
    let logits = net.logits(z).expect("dimension checked by caller");
    let scale = 1.0 + logits.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    logits
        .iter()
        .enumerate()
        .any(|(s, &v)| s != label && v >= logits[label] - 1e-12 * scale)
}

pub fn exact_robustness_oracle(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
    budget: &OracleBudget,
) -> Result<OracleResult> {
    let d = net.input_dim();
    if x.len() != d {
        return Err(Error::Dimension {
            expected: d,
            found: x.len(),
        });
    }
    if label >= net.num_classes() {
        return Err(Error::input(format!("label {label} out of range")));
    }
    if is_adversarial(net, x, label) {
        return Ok(OracleResult {
            bound: 0.0,
            witness: Some(x.to_owned()),
            exhausted: false,
        });
    }
    let mut best = Candidate::none();
    ray_search(net, x, label, p, budget, &mut best);
    let mut exhausted = false;
    if d == 2 {
        exhausted = region_walk(net, x, label, p, budget, &mut best)?;
    }
    Ok(OracleResult {
        bound: best.norm,
        witness: best.point,
        exhausted,
    })
}

struct Candidate {
    norm: f64,
    point: Option<Array1<f64>>,
}

impl Candidate {
    fn none() -> Self {
        Self {
            norm: f64::INFINITY,
            point: None,
        }
    }

    fn offer(&mut self, norm: f64, point: Array1<f64>) {
        if norm < self.norm {
            self.norm = norm;
            self.point = Some(point);
        }
    }
}

fn ray_search(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
    budget: &OracleBudget,
    best: &mut Candidate,
) {
    let d = x.len();
    let mut rng = seed::rng(budget.seed, seed::purpose::ORACLE, 0);
    let mut dirs: Vec<Array1<f64>> = Vec::with_capacity(2 * d + budget.directions);
    for i in 0..d {
        for s in [-1.0, 1.0] {
            let mut u = Array1::zeros(d);
            u[i] = s;
            dirs.push(u);
        }
    }
    for _ in 0..budget.directions {
        dirs.push(Array1::from_shape_fn(d, |_| rng.sample(StandardNormal)));
    }
    for u in dirs {
        let len = p.norm(&u);
        if len == 0.0 {
            continue;
        }
        let u = u / len;
        // an lp-unit vector has l∞ norm ≤ 1, so stepping to max_radius stays in range
        let step = budget.max_radius / budget.ray_steps as f64;
        let at = |t: f64| &x + &(&u * t);
        let mut prev = 0.0;
        for k in 1..=budget.ray_steps {
            let t = step * k as f64;
            if t >= best.norm {
                break;
            }
            if is_adversarial(net, at(t).view(), label) {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    if is_adversarial(net, at(mid).view(), label) {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                let z = at(hi);
                best.offer(p.norm(&(&z - &x)), z);
                break;
            }
            prev = t;
        }
    }
}

/// Convex polygon with counter-clockwise vertices; `labels[i]` names the
/// hidden unit whose hyperplane carries the edge from vertex `i` to `i+1`.
#[derive(Debug, Clone)]
struct Polygon {
    verts: Vec<[f64; 2]>,
    labels: Vec<Option<usize>>,
}

impl Polygon {
    fn square(center: [f64; 2], half: f64) -> Self {
        let [cx, cy] = center;
        Self {
            verts: vec![
                [cx - half, cy - half],
                [cx + half, cy - half],
                [cx + half, cy + half],
                [cx - half, cy + half],
            ],
            labels: vec![None; 4],
        }
    }

    fn is_empty(&self) -> bool {
        self.verts.is_empty()
    }

    /// Keeps `{z : ⟨a, z⟩ + b ≥ 0}`.
    fn clip(&self, a: [f64; 2], b: f64, label: Option<usize>) -> Polygon {
        let n = self.verts.len();
        let mut verts = Vec::with_capacity(n + 1);
        let mut labels = Vec::with_capacity(n + 1);
        let val = |v: &[f64; 2]| a[0] * v[0] + a[1] * v[1] + b;
        for i in 0..n {
            let (u, w) = (self.verts[i], self.verts[(i + 1) % n]);
            let (fu, fw) = (val(&u), val(&w));
            let lab = self.labels[i];
            let cross = |fu: f64, fw: f64| {
                let t = fu / (fu - fw);
                [u[0] + t * (w[0] - u[0]), u[1] + t * (w[1] - u[1])]
            };
            match (fu >= 0.0, fw >= 0.0) {
                (true, true) => {
                    verts.push(u);
                    labels.push(lab);
                }
                (true, false) => {
                    verts.push(u);
                    labels.push(lab);
                    verts.push(cross(fu, fw));
                    labels.push(label);
                }
                (false, true) => {
                    verts.push(cross(fu, fw));
                    labels.push(lab);
                }
                (false, false) => {}
            }
        }
        Polygon { verts, labels }
    }

    fn contains(&self, z: [f64; 2]) -> bool {
        let n = self.verts.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|i| {
            let (u, w) = (self.verts[i], self.verts[(i + 1) % n]);
            (w[0] - u[0]) * (z[1] - u[1]) - (w[1] - u[1]) * (z[0] - u[0]) >= 0.0
        })
    }

    /// Exact lp distance from `x` and the closest point.
    fn distance(&self, x: [f64; 2], p: NormOrder) -> (f64, [f64; 2]) {
        if self.contains(x) {
            return (0.0, x);
        }
        let n = self.verts.len();
        let mut best = (f64::INFINITY, x);
        for i in 0..n {
            let (a, b) = (self.verts[i], self.verts[(i + 1) % n]);
            let cand = segment_distance(x, a, b, p);
            if cand.0 < best.0 {
                best = cand;
            }
        }
        best
    }
}

/// `min_{t ∈ [0,1]} ‖a + t(b - a) - x‖_p` and its minimiser.
fn segment_distance(x: [f64; 2], a: [f64; 2], b: [f64; 2], p: NormOrder) -> (f64, [f64; 2]) {
    let c = [a[0] - x[0], a[1] - x[1]];
    let e = [b[0] - a[0], b[1] - a[1]];
    let point = |t: f64| [a[0] + t * e[0], a[1] + t * e[1]];
    let phi = |t: f64| p.norm(&[c[0] + t * e[0], c[1] + t * e[1]]);
    let mut cands = vec![0.0, 1.0];
    match p {
        NormOrder::Finite(v) if v == 2.0 => {
            let ee = e[0] * e[0] + e[1] * e[1];
            if ee > 0.0 {
                cands.push(-(c[0] * e[0] + c[1] * e[1]) / ee);
            }
        }
        NormOrder::Finite(v) if v == 1.0 => {
            for i in 0..2 {
                if e[i] != 0.0 {
                    cands.push(-c[i] / e[i]);
                }
            }
        }
        NormOrder::Infinity => {
            for i in 0..2 {
                if e[i] != 0.0 {
                    cands.push(-c[i] / e[i]);
                }
            }
            for s in [-1.0, 1.0] {
                let den = e[0] - s * e[1];
                if den != 0.0 {
                    cands.push(-(c[0] - s * c[1]) / den);
                }
            }
        }
        NormOrder::Finite(_) => {
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            for _ in 0..200 {
                let m1 = hi - g * (hi - lo);
                let m2 = lo + g * (hi - lo);
                if phi(m1) <= phi(m2) {
                    hi = m2;
                } else {
                    lo = m1;
                }
            }
            cands.push(0.5 * (lo + hi));
        }
    }
    cands
        .into_iter()
        .filter(|t| (0.0..=1.0).contains(t))
        .map(|t| (phi(t), point(t)))
        .fold((f64::INFINITY, x), |acc, c| if c.0 < acc.0 { c } else { acc })
}

/// Patterns with a zero sign are keyed as inactive, matching their masks.
fn normalize(pattern: &ActivationPattern) -> ActivationPattern {
    ActivationPattern::from_signs(
        (0..pattern.layers())
            .map(|l| pattern.signs(l).iter().map(|&s| if s > 0 { 1 } else { -1 }).collect())
            .collect(),
    )
}

fn region_polygon(region: &RegionDescription, center: [f64; 2], half: f64) -> Polygon {
    let mut poly = Polygon::square(center, half);
    for (idx, h) in region.halfspaces().iter().enumerate() {
        let o = if h.orientation > 0 { 1.0 } else { -1.0 };
        poly = poly.clip([o * h.normal[0], o * h.normal[1]], o * h.offset, Some(idx));
        if poly.is_empty() {
            break;
        }
    }
    poly
}

struct Frontier {
    dist: f64,
    region: RegionDescription,
    poly: Polygon,
}

fn region_walk(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
    budget: &OracleBudget,
    best: &mut Candidate,
) -> Result<bool> {
    let xc = [x[0], x[1]];
    let half = budget.max_radius;
    let start = normalize(&net.activation_pattern(x)?);
    let mut seen: HashSet<ActivationPattern> = HashSet::new();
    seen.insert(start.clone());
    let region = net.region_for_pattern(&start)?;
    let poly = region_polygon(&region, xc, half);
    let mut frontier = vec![Frontier {
        dist: 0.0,
        region,
        poly,
    }];
    let mut visited = 0usize;
    let k = net.num_classes();
    while !frontier.is_empty() {
        let i = frontier
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.dist.total_cmp(&b.1.dist))
            .map(|(i, _)| i)
            .expect("nonempty");
        let cur = frontier.swap_remove(i);
        if cur.dist >= best.norm {
            break;
        }
        visited += 1;
        if visited > budget.max_regions {
            return Ok(true);
        }
        let out = cur.region.output_map();
        for s in (0..k).filter(|&s| s != label) {
            let a = [
                out.linear[[s, 0]] - out.linear[[label, 0]],
                out.linear[[s, 1]] - out.linear[[label, 1]],
            ];
            let b = out.offset[s] - out.offset[label];
            let piece = cur.poly.clip(a, b, None);
            if piece.is_empty() {
                continue;
            }
            let (dist, z) = piece.distance(xc, p);
            if dist < best.norm {
                let z = Array1::from_vec(z.to_vec());
                if is_adversarial(net, z.view(), label) {
                    best.offer(dist, z);
                }
            }
        }
        let n = cur.poly.verts.len();
        for e in 0..n {
            if cur.poly.labels[e].is_none() {
                continue;
            }
            let (u, w) = (cur.poly.verts[e], cur.poly.verts[(e + 1) % n]);
            let len = ((w[0] - u[0]).powi(2) + (w[1] - u[1]).powi(2)).sqrt();
            if len < 1e-12 {
                continue;
            }
            let outward = [(w[1] - u[1]) / len, -(w[0] - u[0]) / len];
            let mid = [0.5 * (u[0] + w[0]), 0.5 * (u[1] + w[1])];
            let mut step = 1e-9 * (1.0 + half);
            let mut neighbour = None;
            for _ in 0..4 {
                let z = Array1::from_vec(vec![mid[0] + step * outward[0], mid[1] + step * outward[1]]);
                let pat = net.activation_pattern(z.view())?;
                if pat.is_strict() {
                    neighbour = Some(pat);
                    break;
                }
                step *= 10.0;
            }
            let Some(pat) = neighbour else { continue };
            if !seen.insert(pat.clone()) {
                continue;
            }
            let region = net.region_for_pattern(&pat)?;
            let poly = region_polygon(&region, xc, half);
            if poly.is_empty() {
                continue;
            }
            let (dist, _) = poly.distance(xc, p);
            if dist < best.norm {
                frontier.push(Frontier { dist, region, poly });
            }
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use ndarray::array;

    /// Class 1 wins where relu(z₁) + relu(z₂) > 1.
    fn two_unit_net() -> ReluNet {
        ReluNet::new(vec![
            Layer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap(),
            Layer::new(array![[0.0, 0.0], [1.0, 1.0]], array![1.0, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn hand_enumerated_regions() {
        // from x = (-0.1, -0.2): l∞ needs both coordinates up by 0.65, l2
        // projects onto z₁ + z₂ = 1 at (0.55, 0.45), l1 moves z₁ alone to 1
        let net = two_unit_net();
        let x = array![-0.1, -0.2];
        let budget = OracleBudget::default();
        let cases = [
            (NormOrder::INF, 0.65),
            (NormOrder::TWO, 0.65 * 2f64.sqrt()),
            (NormOrder::ONE, 1.1),
        ];
        for (p, want) in cases {
            let r = exact_robustness_oracle(&net, x.view(), 0, p, &budget).unwrap();
            assert!((r.bound - want).abs() < 1e-9, "p={p}: {} vs {want}", r.bound);
            assert!(!r.exhausted);
        }
    }

    #[test]
    fn linear_classifier_matches_decision_distance() {
        let net = ReluNet::new(vec![
            Layer::new(array![[1.0, 2.0], [-1.0, 0.5]], array![0.1, 0.0]).unwrap(),
        ])
        .unwrap();
        let x = array![0.4, 0.3];
        let label = net.classify(x.view()).unwrap();
        for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::INF] {
            let prof = crate::certify::distance_profile(&net, x.view(), label, p).unwrap();
            let r = exact_robustness_oracle(&net, x.view(), label, p, &OracleBudget::default())
                .unwrap();
            assert!((r.bound - prof.min_decision).abs() < 1e-12, "p={p}");
        }
    }

    #[test]
    fn misclassified_is_zero() {
        let net = two_unit_net();
        let r = exact_robustness_oracle(
            &net,
            array![2.0, 2.0].view(),
            0,
            NormOrder::TWO,
            &OracleBudget::default(),
        )
        .unwrap();
        assert_eq!(r.bound, 0.0);
    }

    #[test]
    fn segment_distance_matches_golden_section() {
        let x = [0.3, -0.2];
        let (a, b) = ([1.0, 2.0], [-1.5, 0.7]);
        for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::INF] {
            let exact = segment_distance(x, a, b, p).0;
            let mut best = f64::INFINITY;
            for i in 0..=200_000 {
                let t = i as f64 / 200_000.0;
                let z = [a[0] + t * (b[0] - a[0]) - x[0], a[1] + t * (b[1] - a[1]) - x[1]];
                best = best.min(p.norm(&z));
            }
            assert!(exact <= best + 1e-12 && best - exact < 1e-4, "p={p}");
        }
    }

    #[test]
    fn clipping_keeps_the_right_side() {
        let sq = Polygon::square([0.0, 0.0], 1.0);
        let half = sq.clip([1.0, 0.0], 0.0, Some(7));
        assert_eq!(half.verts.len(), 4);
        assert!(half.verts.iter().all(|v| v[0] >= 0.0));
        assert!(half.labels.contains(&Some(7)));
        assert!(sq.clip([1.0, 0.0], -2.0, None).is_empty());
    }
}
