//! Robust test error evaluation: attack lower bounds against certified
//! upper bounds on the same points.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, overlap_stats, AttackNorm, AttackSettings, OverlapStats, PointAttack};
use crate::certify::{certify_dataset, EpsTriple, ErrorBounds, PointCertificate};
use crate::data::Dataset;
use crate::geometry::hull_min_norm;
use crate::net::ReluNet;
use crate::norm::NormOrder;
use crate::train::test_error;
use crate::{Error, Result};

/// Points evaluated by default, counted from the start of the dataset.
pub const DEFAULT_EVAL_POINTS: usize = 1000;

/// Tolerance when comparing attack perturbations with certificates.
pub const SANDWICH_TOL: f64 = 1e-7;

/// The l2 radius implied by an l1 and an l∞ radius: the smallest l2 norm
/// outside the convex hull of the two balls.
pub fn derive_eps2(eps1: f64, eps_inf: f64) -> Result<f64> {
    if !(eps1 > eps_inf && eps_inf > 0.0) || !eps1.is_finite() {
        return Err(Error::domain(format!(
            "need eps1 > eps_inf > 0, got ({eps1}, {eps_inf})"
        )));
    }
    hull_min_norm(eps1, eps_inf, NormOrder::TWO)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub model_id: String,
    pub eps: EpsTriple,
    pub max_points: usize,
    pub attack: AttackSettings,
    /// Omits wall-clock time so reports are byte-identical across runs.
    pub deterministic: bool,
}

impl EvalConfig {
    pub fn new(model_id: impl Into<String>, eps: EpsTriple) -> Self {
        Self {
            model_id: model_id.into(),
            eps,
            max_points: DEFAULT_EVAL_POINTS,
            attack: AttackSettings::default(),
            deterministic: true,
        }
    }
}

/// One row per threat model: `l1`, `l2`, `linf` and `union`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub threat: String,
    pub eps: Option<f64>,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub model_id: String,
    pub dataset: String,
    pub eps: EpsTriple,
    pub test_error: f64,
    pub points_evaluated: usize,
    pub lower: ErrorBounds,
    pub upper: ErrorBounds,
    pub rows: Vec<ReportRow>,
    /// Percentages of successful p-attacks inside the q-ball, `[p][q]`.
    pub overlap: [[Option<f64>; 3]; 3],
    pub seed: u64,
    pub config: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn rows_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.rows {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| Error::input(e.to_string()))
    }
}

/// Checks that no attack undercuts a certificate and that LB ≤ UB.
pub fn check_sandwich(
    attacks: &[PointAttack],
    certs: &[PointCertificate],
    lower: &ErrorBounds,
    upper: &ErrorBounds,
) -> Result<()> {
    for (i, (a, c)) in attacks.iter().zip(certs).enumerate() {
        let radii = [c.l1_bound(), c.l2_bound(), c.linf_bound()];
        for norm in AttackNorm::ALL {
            let k = norm as usize;
            if let Some(p) = &a.found[k] {
                if p.norms[k] < radii[k] - SANDWICH_TOL {
                    return Err(Error::Invariant(format!(
                        "point {i}: {norm} attack at {} undercuts certificate {}",
                        p.norms[k], radii[k]
                    )));
                }
            }
        }
    }
    let pairs = [
        ("l1", lower.l1, upper.l1),
        ("l2", lower.l2, upper.l2),
        ("linf", lower.linf, upper.linf),
        ("union", lower.union, upper.union),
    ];
    for (name, lb, ub) in pairs {
        if lb > ub {
            return Err(Error::Invariant(format!("{name}: lower bound {lb} > upper bound {ub}")));
        }
    }
    Ok(())
}

/// Test error on all of `data`; both bounds on its first `max_points` points.
pub fn run_evaluation(net: &ReluNet, data: &Dataset, cfg: &EvalConfig) -> Result<Report> {
    let start = Instant::now();
    let err = test_error(net, data)?;
    let head = data.head(cfg.max_points);
    if head.is_empty() {
        return Err(Error::domain("no points to evaluate"));
    }
    let (xs, ys) = (head.features(), head.labels());
    let attacks = attack_dataset(net, xs, ys, &cfg.eps, &AttackNorm::ALL, &cfg.attack)?;
    let certs = certify_dataset(net, xs, ys)?;
    let lower = ErrorBounds::from_flags(&attacks.iter().map(PointAttack::broken).collect::<Vec<_>>());
    let upper = ErrorBounds::from_flags(&certs.iter().map(|c| c.uncertified(&cfg.eps)).collect::<Vec<_>>());
    check_sandwich(&attacks, &certs, &lower, &upper)?;
    let stats: OverlapStats = overlap_stats(&attacks, &cfg.eps);
    let overlap = AttackNorm::ALL.map(|p| AttackNorm::ALL.map(|q| stats.percent(p, q)));
    let rows = vec![
        ReportRow { threat: "l1".into(), eps: Some(cfg.eps.l1), lower: lower.l1, upper: upper.l1 },
        ReportRow { threat: "l2".into(), eps: Some(cfg.eps.l2), lower: lower.l2, upper: upper.l2 },
        ReportRow { threat: "linf".into(), eps: Some(cfg.eps.linf), lower: lower.linf, upper: upper.linf },
        ReportRow { threat: "union".into(), eps: None, lower: lower.union, upper: upper.union },
    ];
    Ok(Report {
        model_id: cfg.model_id.clone(),
        dataset: data.name.clone(),
        eps: cfg.eps,
        test_error: err,
        points_evaluated: head.len(),
        lower,
        upper,
        rows,
        overlap,
        seed: cfg.attack.seed,
        config: cfg.clone(),
        runtime_secs: (!cfg.deterministic).then(|| start.elapsed().as_secs_f64()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::blobs;
    use crate::seed;

    #[test]
    fn eps2_examples() {
        assert!((derive_eps2(1.0, 0.1).unwrap() - 0.3162).abs() < 5e-5);
        assert!((derive_eps2(3.0, 4.0 / 255.0).unwrap() - 0.2170).abs() < 5e-5);
        assert!((derive_eps2(2.0, 2.0 / 255.0).unwrap() - 0.1252).abs() < 5e-5);
        assert!(derive_eps2(0.1, 0.1).is_err());
        assert!(derive_eps2(1.0, 0.0).is_err());
    }

    #[test]
    fn report_is_deterministic_and_sandwiched() {
        let data = blobs(60, 2, 0.35, 0.08, 3).unwrap();
        let mut rng = seed::rng(3, seed::purpose::INIT, 0);
        let net = ReluNet::random(2, &[8], 2, &mut rng).unwrap();
        let eps = EpsTriple { l1: 0.2, l2: derive_eps2(0.2, 0.05).unwrap(), linf: 0.05 };
        let mut cfg = EvalConfig::new("random", eps);
        cfg.attack.iterations = 20;
        cfg.attack.restarts = 2;
        let a = run_evaluation(&net, &data, &cfg).unwrap();
        let b = run_evaluation(&net, &data, &cfg).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert!(a.runtime_secs.is_none());
        for row in &a.rows {
            assert!(row.lower <= row.upper);
        }
        assert!(a.rows_csv().unwrap().starts_with("threat,eps,lower,upper"));
    }
}
