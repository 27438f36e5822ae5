//! Distances to region and decision hyperplanes and the certificates built on them.
//!
//! Inside the linear region `Q(x)` the classifier is affine, so the lp
//! distance from `x` to each face hyperplane and to each decision hyperplane
//! `f_c = f_s` is a ratio of an affine value and a dual norm. The smallest
//! of them give a certified radius for one norm; the l1 and l∞ radii
//! together give a certified radius for every `p` through the convex hull of
//! the two balls.
//!
//! Input-domain box constraints are not used here: dropping them only makes
//! certificates smaller.

use ndarray::{ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::hull_min_norm;
use crate::net::{argmax, RegionDescription, ReluNet};
use crate::norm::NormOrder;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDistance {
    pub layer: usize,
    pub unit: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecisionDistance {
    pub class: usize,
    /// Signed: negative when class `class` beats the reference label.
    pub distance: f64,
}

/// lp distances from a point to the hyperplanes of its linear region.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub p: NormOrder,
    pub label: usize,
    pub boundary: Vec<BoundaryDistance>,
    pub decision: Vec<DecisionDistance>,
    pub min_boundary: f64,
    pub min_decision: f64,
}

impl DistanceProfile {
    /// Builds the profile from an already computed region of `x`.
    ///
    /// A hyperplane with zero normal is at distance `+∞` (the unit is constant
    /// on the region). A constant decision difference gives `±∞` by its sign.
    pub fn from_region(
        region: &RegionDescription,
        x: ArrayView1<f64>,
        label: usize,
        p: NormOrder,
    ) -> Result<Self> {
        let q = p.dual();
        let out = region.output_map();
        let k = out.offset.len();
        if label >= k {
            return Err(Error::input(format!("label {label} out of range for {k} classes")));
        }
        let mut boundary = Vec::with_capacity(region.num_halfspaces());
        for (l, map) in region.hidden_maps().iter().enumerate() {
            let values = map.apply(x);
            for (j, &value) in values.iter().enumerate() {
                let den = q.norm(map.linear.row(j));
                let distance = if den == 0.0 { f64::INFINITY } else { value.abs() / den };
                boundary.push(BoundaryDistance {
                    layer: l,
                    unit: j,
                    distance,
                });
            }
        }
        let logits = out.apply(x);
        let mut decision = Vec::with_capacity(k.saturating_sub(1));
        for s in (0..k).filter(|&s| s != label) {
            let diff = &out.linear.row(label) - &out.linear.row(s);
            let den = q.norm(&diff);
            let num = logits[label] - logits[s];
            let distance = if den > 0.0 {
                num / den
            } else if num > 0.0 {
                f64::INFINITY
            } else if num < 0.0 {
                f64::NEG_INFINITY
            } else {
                0.0
            };
            decision.push(DecisionDistance { class: s, distance });
        }
        let min_boundary = boundary.iter().map(|b| b.distance).fold(f64::INFINITY, f64::min);
        let min_decision = decision.iter().map(|d| d.distance).fold(f64::INFINITY, f64::min);
        Ok(Self {
            p,
            label,
            boundary,
            decision,
            min_boundary,
            min_decision,
        })
    }

    /// Single-norm certified radius: `d^B` when the decision hyperplanes are
    /// farther than every face, else `max(d^D, 0)`.
    pub fn certified_radius(&self) -> f64 {
        let (b, d) = (self.min_boundary, self.min_decision);
        if b < d {
            b
        } else if d.abs() <= b {
            d.max(0.0)
        } else {
            0.0
        }
    }

    /// `min{d^B, |d^D|}`.
    pub fn rho(&self) -> f64 {
        self.min_boundary.min(self.min_decision.abs())
    }

    pub fn is_correct(&self) -> bool {
        self.min_decision > 0.0
    }
}

pub fn distance_profile(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
) -> Result<DistanceProfile> {
    let region = net.region_description(x)?;
    DistanceProfile::from_region(&region, x, label, p)
}

/// Lower bound on the lp robustness radius for one norm.
pub fn certify_single_norm(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
) -> Result<f64> {
    Ok(distance_profile(net, x, label, p)?.certified_radius())
}

/// Universal radius from `ρ₁` and `ρ∞` for any `p`.
///
/// `p = 1` and `p = ∞` return the limits `ρ₁` and `ρ∞`; a misclassified
/// point or `ρ∞ = 0` gives 0.
pub fn universal_radius(rho1: f64, rho_inf: f64, correct: bool, p: NormOrder) -> f64 {
    if !correct || rho_inf <= 0.0 || rho1 <= 0.0 {
        return 0.0;
    }
    if p.is_one() {
        return rho1;
    }
    if p.is_infinite() {
        return rho_inf;
    }
    if rho_inf.is_infinite() {
        return f64::INFINITY;
    }
    hull_min_norm(rho1, rho_inf, p).expect("positive finite radii")
}

/// Lower bound on the lp robustness for any `p` from the l1 and l∞ profiles.
pub fn certify_universal(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    p: NormOrder,
) -> Result<f64> {
    let region = net.region_description(x)?;
    let one = DistanceProfile::from_region(&region, x, label, NormOrder::ONE)?;
    let inf = DistanceProfile::from_region(&region, x, label, NormOrder::INF)?;
    Ok(universal_radius(one.rho(), inf.rho(), one.is_correct(), p))
}

/// Per-point certificates for the norms used in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCertificate {
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub rho1: f64,
    pub rho_inf: f64,
}

impl PointCertificate {
    pub fn universal(&self, p: NormOrder) -> f64 {
        universal_radius(self.rho1, self.rho_inf, self.correct, p)
    }

    /// Radius used for the robust error upper bound: the single-norm radius
    /// for l1 and l∞ (which coincide with the universal limits) and the
    /// universal radius for l2.
    pub fn l1_bound(&self) -> f64 {
        if self.correct {
            self.l1.max(self.rho1)
        } else {
            0.0
        }
    }

    pub fn linf_bound(&self) -> f64 {
        if self.correct {
            self.linf.max(self.rho_inf)
        } else {
            0.0
        }
    }

    pub fn l2_bound(&self) -> f64 {
        self.universal(NormOrder::TWO)
    }

    /// Which of the three balls fail to be certified.
    pub fn uncertified(&self, eps: &EpsTriple) -> [bool; 3] {
        [
            !self.correct || self.l1_bound() <= eps.l1,
            !self.correct || self.l2_bound() <= eps.l2,
            !self.correct || self.linf_bound() <= eps.linf,
        ]
    }
}

pub fn certify_point(net: &ReluNet, x: ArrayView1<f64>, label: usize) -> Result<PointCertificate> {
    let region = net.region_description(x)?;
    let one = DistanceProfile::from_region(&region, x, label, NormOrder::ONE)?;
    let two = DistanceProfile::from_region(&region, x, label, NormOrder::TWO)?;
    let inf = DistanceProfile::from_region(&region, x, label, NormOrder::INF)?;
    let predicted = argmax(region.output(x).view());
    let correct = one.is_correct();
    Ok(PointCertificate {
        label,
        predicted,
        correct,
        l1: one.certified_radius(),
        l2: two.certified_radius(),
        linf: inf.certified_radius(),
        rho1: one.rho(),
        rho_inf: inf.rho(),
    })
}

pub fn certify_dataset(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
) -> Result<Vec<PointCertificate>> {
    if xs.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: xs.nrows(),
            found: labels.len(),
        });
    }
    (0..labels.len())
        .into_par_iter()
        .map(|i| certify_point(net, xs.row(i), labels[i]))
        .collect()
}

/// Radii `(ε₁, ε₂, ε∞)` of the three threat balls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsTriple {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

/// Fractions of points in `[0, 1]`, per norm and for the union of the balls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBounds {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
    pub union: f64,
}

impl ErrorBounds {
    pub fn from_flags(flags: &[[bool; 3]]) -> Self {
        let n = flags.len() as f64;
        let frac = |f: &dyn Fn(&[bool; 3]) -> bool| flags.iter().filter(|x| f(x)).count() as f64 / n;
        Self {
            l1: frac(&|f| f[0]),
            l2: frac(&|f| f[1]),
            linf: frac(&|f| f[2]),
            union: frac(&|f| f.iter().any(|&b| b)),
        }
    }
}

/// Fraction of points that are misclassified or not certified for at least
/// one of the three balls.
pub fn robust_error_upper_bound(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    eps: &EpsTriple,
) -> Result<ErrorBounds> {
    if labels.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let certs = certify_dataset(net, xs, labels)?;
    let flags: Vec<[bool; 3]> = certs.iter().map(|c| c.uncertified(eps)).collect();
    Ok(ErrorBounds::from_flags(&flags))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{union_min_norm, BallPair};
    use crate::net::Layer;
    use crate::seed;
    use ndarray::{array, Array1, Array2};
    use rand::Rng;

    fn linear_classifier(w: Array2<f64>, b: Array1<f64>) -> ReluNet {
        ReluNet::new(vec![Layer::new(w, b).unwrap()]).unwrap()
    }

    #[test]
    fn decision_distance_of_a_unit_row() {
        let net = linear_classifier(array![[1.0, 0.0], [0.0, 0.0]], array![0.0, 0.0]);
        for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::Finite(3.0), NormOrder::INF] {
            let prof = distance_profile(&net, array![1.0, 0.0].view(), 0, p).unwrap();
            assert_eq!(prof.min_decision, 1.0);
            assert_eq!(prof.min_boundary, f64::INFINITY);
            assert_eq!(prof.certified_radius(), 1.0);
        }
    }

    #[test]
    fn boundary_distance_by_hand() {
        let net = ReluNet::new(vec![
            Layer::new(array![[3.0, 4.0]], array![0.0]).unwrap(),
            Layer::new(array![[1.0], [-1.0]], array![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let prof = distance_profile(&net, array![1.0, 0.0].view(), 0, NormOrder::TWO).unwrap();
        assert!((prof.boundary[0].distance - 0.6).abs() < 1e-15);
    }

    #[test]
    fn misclassified_point_gets_zero() {
        let net = linear_classifier(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
        let x = array![0.2, 0.7];
        for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::INF] {
            let prof = distance_profile(&net, x.view(), 0, p).unwrap();
            assert!(prof.min_decision < 0.0);
            assert_eq!(prof.certified_radius(), 0.0);
            assert_eq!(certify_universal(&net, x.view(), 0, NormOrder::TWO).unwrap(), 0.0);
        }
        let c = certify_point(&net, x.view(), 0).unwrap();
        assert!(!c.correct);
        assert_eq!(c.predicted, 1);
    }

    #[test]
    fn linear_classifier_is_exact() {
        // distance to x1 = x2 from (0.7, 0.2) in l2 is 0.5/√2
        let net = linear_classifier(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
        let r = certify_single_norm(&net, array![0.7, 0.2].view(), 0, NormOrder::TWO).unwrap();
        assert!((r - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn universal_examples() {
        let u = universal_radius(1.0, 0.1, true, NormOrder::TWO);
        assert!((u - 0.316228).abs() < 1e-6);
        let u = universal_radius(0.6, 0.2, true, NormOrder::TWO);
        assert!((u - 0.6 / 3f64.sqrt()).abs() < 1e-12);
        assert_eq!(universal_radius(0.6, 0.2, false, NormOrder::TWO), 0.0);
        assert_eq!(universal_radius(0.6, 0.0, true, NormOrder::TWO), 0.0);
        assert_eq!(universal_radius(0.6, 0.2, true, NormOrder::ONE), 0.6);
        assert_eq!(universal_radius(0.6, 0.2, true, NormOrder::INF), 0.2);
    }

    /// `min ‖z - x‖_p` subject to `⟨v, z⟩ + a = 0` by brute force over a
    /// parametrisation of the line (2D only).
    fn line_distance_brute(v: [f64; 2], a: f64, x: [f64; 2], p: NormOrder) -> f64 {
        // points on the line: z = z0 + t·(-v1, v0)
        let n2 = v[0] * v[0] + v[1] * v[1];
        let s = -(v[0] * x[0] + v[1] * x[1] + a) / n2;
        let z0 = [x[0] + s * v[0], x[1] + s * v[1]];
        let dir = [-v[1], v[0]];
        let (mut lo, mut hi) = (-100.0, 100.0);
        let f = |t: f64| p.norm(&[z0[0] + t * dir[0] - x[0], z0[1] + t * dir[1] - x[1]]);
        for _ in 0..300 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if f(m1) <= f(m2) {
                hi = m2;
            } else {
                lo = m1;
            }
        }
        f(0.5 * (lo + hi))
    }

    #[test]
    fn boundary_distances_match_constrained_minimisation() {
        let mut rng = seed::rng(3, seed::purpose::INIT, 0);
        for trial in 0..10 {
            let net = ReluNet::random(2, &[5, 4], 3, &mut rng).unwrap();
            let x = array![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let region = net.region_description(x.view()).unwrap();
            for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::Finite(3.0), NormOrder::INF] {
                let prof = DistanceProfile::from_region(&region, x.view(), 0, p).unwrap();
                for (h, b) in region.halfspaces().iter().zip(&prof.boundary) {
                    if h.normal.iter().all(|&v| v == 0.0) {
                        assert_eq!(b.distance, f64::INFINITY);
                        continue;
                    }
                    let brute =
                        line_distance_brute([h.normal[0], h.normal[1]], h.offset, [x[0], x[1]], p);
                    assert!(
                        (brute - b.distance).abs() < 1e-7 * (1.0 + brute),
                        "trial {trial} p {p}: {brute} vs {}",
                        b.distance
                    );
                }
            }
        }
    }

    #[test]
    fn boundary_distances_shrink_with_p() {
        let mut rng = seed::rng(8, seed::purpose::INIT, 0);
        let net = ReluNet::random(5, &[10, 10], 4, &mut rng).unwrap();
        let x = Array1::from_shape_fn(5, |_| rng.random_range(0.0..1.0));
        let r = net.region_description(x.view()).unwrap();
        let d1 = DistanceProfile::from_region(&r, x.view(), 0, NormOrder::ONE).unwrap();
        let d2 = DistanceProfile::from_region(&r, x.view(), 0, NormOrder::TWO).unwrap();
        let di = DistanceProfile::from_region(&r, x.view(), 0, NormOrder::INF).unwrap();
        for ((a, b), c) in d1.boundary.iter().zip(&d2.boundary).zip(&di.boundary) {
            assert!(c.distance <= b.distance && b.distance <= a.distance);
        }
    }

    #[test]
    fn universal_dominates_union_bound() {
        let mut rng = seed::rng(12, seed::purpose::INIT, 0);
        for _ in 0..50 {
            let net = ReluNet::random(3, &[8], 3, &mut rng).unwrap();
            let x = Array1::from_shape_fn(3, |_| rng.random_range(0.0..1.0));
            let label = net.classify(x.view()).unwrap();
            let c = certify_point(&net, x.view(), label).unwrap();
            if c.rho_inf <= 0.0 {
                continue;
            }
            let bp = BallPair::new(c.rho1, c.rho_inf, 3).unwrap();
            for p in [1.5, 2.0, 4.0] {
                let p = NormOrder::Finite(p);
                assert!(c.universal(p) >= union_min_norm(&bp, p) - 1e-12);
            }
        }
    }

    #[test]
    fn scaling_the_output_layer_changes_nothing() {
        let mut rng = seed::rng(2, seed::purpose::INIT, 0);
        let net = ReluNet::random(3, &[6, 5], 3, &mut rng).unwrap();
        let mut layers = net.layers().to_vec();
        let last = layers.pop().unwrap();
        layers.push(Layer::new(last.weights() * 3.5, last.bias() * 3.5).unwrap());
        let scaled = ReluNet::new(layers).unwrap();
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| rng.random_range(0.0..1.0));
            let label = net.classify(x.view()).unwrap();
            let a = certify_point(&net, x.view(), label).unwrap();
            let b = certify_point(&scaled, x.view(), label).unwrap();
            for (u, v) in [(a.l1, b.l1), (a.l2, b.l2), (a.linf, b.linf), (a.rho1, b.rho1)] {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn upper_bound_examples() {
        let net = linear_classifier(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]);
        let eps = EpsTriple {
            l1: 0.01,
            l2: 0.005,
            linf: 0.002,
        };
        let xs = array![[0.2, 0.7]];
        let ub = robust_error_upper_bound(&net, xs.view(), &[0], &eps).unwrap();
        assert_eq!(ub.union, 1.0);
        // margins far larger than every eps
        let xs = array![[0.9, 0.1], [0.1, 0.9]];
        let ub = robust_error_upper_bound(&net, xs.view(), &[0, 1], &eps).unwrap();
        assert_eq!(ub.union, 0.0);
        assert!(robust_error_upper_bound(&net, Array2::zeros((0, 2)).view(), &[], &eps).is_err());
    }
}
