//! Maximum-margin regularizers, the training loss and its exact gradient.
//!
//! Inside the linear region of a point `x` the network is affine, so the
//! boundary distances `|g_j| / ‖V_j‖_q` and the signed decision distances
//! `(f_c - f_s) / ‖V_c - V_s‖_q` are smooth functions of the parameters once
//! the activation pattern, the bottom-k orders and the active hinges are
//! frozen. Gradients are accumulated by hand through both numerators and
//! denominators, including the dependence of every `V⁽ˡ⁾` on earlier layers.
//!
//! Subgradient choices at kinks: ReLU, `|·|` and hinge kinks contribute 0,
//! and sort ties keep the lower `(layer, unit)` or class index.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::net::ReluNet;
use crate::norm::{sign, NormOrder};
use crate::{Error, Result};

/// Bottom-k hinge regularizer for a single lp-norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrLpConfig {
    pub p: NormOrder,
    pub k_boundary: usize,
    pub k_decision: usize,
    pub gamma_boundary: f64,
    pub gamma_decision: f64,
}

impl MmrLpConfig {
    pub fn validate(&self, net: &ReluNet) -> Result<()> {
        let n = net.total_hidden_units();
        let k = net.num_classes();
        if self.k_boundary == 0 || self.k_boundary > n {
            return Err(Error::domain(format!("k_boundary must be in 1..={n}")));
        }
        if self.k_decision == 0 || self.k_decision + 1 > k {
            return Err(Error::domain(format!("k_decision must be in 1..={}", k.saturating_sub(1))));
        }
        if !(self.gamma_boundary > 0.0 && self.gamma_decision > 0.0) {
            return Err(Error::domain("margins must be positive"));
        }
        Ok(())
    }
}

/// The l1 + l∞ regularizer and its schedules.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmrUniversalConfig {
    pub lambda1: f64,
    pub lambda_inf: f64,
    pub gamma1: f64,
    pub gamma_inf: f64,
    /// Fraction of hidden units entering the boundary term at the first epoch.
    pub kb_start_frac: f64,
    /// Fraction at the last epoch.
    pub kb_end_frac: f64,
    pub lambda_ramp_epochs: usize,
}

impl Default for MmrUniversalConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda_inf: 6.0,
            gamma1: 1.0,
            gamma_inf: 0.1,
            kb_start_frac: 0.20,
            kb_end_frac: 0.05,
            lambda_ramp_epochs: 10,
        }
    }
}

impl MmrUniversalConfig {
    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda_inf >= 0.0) {
            return Err(Error::domain("lambdas must be nonnegative"));
        }
        if !(self.gamma1 > 0.0 && self.gamma_inf > 0.0) {
            return Err(Error::domain("gammas must be positive"));
        }
        for f in [self.kb_start_frac, self.kb_end_frac] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::domain(format!("kB fraction {f} not in (0, 1]")));
            }
        }
        if self.lambda_ramp_epochs > epochs {
            return Err(Error::domain("lambda ramp longer than training"));
        }
        Ok(())
    }

    /// `kB` at `epoch` (0-based), linear in the epoch between the two
    /// fractions of `hidden_units`, rounded to nearest and at least 1.
    pub fn k_boundary(&self, epoch: usize, epochs: usize, hidden_units: usize) -> usize {
        if hidden_units == 0 {
            return 0;
        }
        let t = if epochs <= 1 {
            0.0
        } else {
            epoch.min(epochs - 1) as f64 / (epochs - 1) as f64
        };
        let frac = self.kb_start_frac + (self.kb_end_frac - self.kb_start_frac) * t;
        ((frac * hidden_units as f64).round() as usize).clamp(1, hidden_units)
    }

    /// Multiplier on both lambdas: `1/10` at epoch 0 rising linearly to 1 at
    /// epoch `lambda_ramp_epochs - 1`.
    pub fn lambda_scale(&self, epoch: usize) -> f64 {
        if self.lambda_ramp_epochs <= 1 {
            return 1.0;
        }
        let t = (epoch as f64 / (self.lambda_ramp_epochs - 1) as f64).min(1.0);
        0.1 + 0.9 * t
    }

    pub fn params_at(&self, epoch: usize, epochs: usize, hidden_units: usize) -> RegularizerParams {
        let s = self.lambda_scale(epoch);
        RegularizerParams {
            lambda1: self.lambda1 * s,
            lambda_inf: self.lambda_inf * s,
            gamma1: self.gamma1,
            gamma_inf: self.gamma_inf,
            k_boundary: self.k_boundary(epoch, epochs, hidden_units),
        }
    }
}

/// The regularizer with its schedules resolved for one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizerParams {
    pub lambda1: f64,
    pub lambda_inf: f64,
    pub gamma1: f64,
    pub gamma_inf: f64,
    pub k_boundary: usize,
}

impl RegularizerParams {
    /// False when both lambdas vanish; the loss then takes the plain path.
    pub fn is_active(&self) -> bool {
        self.lambda1 != 0.0 || self.lambda_inf != 0.0
    }
}

/// Per-layer gradients, shaped like the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &ReluNet) -> Self {
        Self {
            weights: net.layers().iter().map(|l| Array2::zeros(l.weights().raw_dim())).collect(),
            biases: net.layers().iter().map(|l| Array1::zeros(l.bias().raw_dim())).collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }

    /// All entries, weights before biases, layer by layer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter());
            out.extend(b.iter());
        }
        out
    }
}

fn hinge(u: f64) -> f64 {
    (1.0 - u).max(0.0)
}

/// Indices of the `k` smallest values; ties keep the lower index.
fn bottom_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx.truncate(k);
    idx
}

/// Forward quantities of one point, with every `V⁽ˡ⁾` materialised.
struct PointForward {
    label: usize,
    input: Array1<f64>,
    /// `g⁽ˡ⁾` for all layers, logits last.
    pre: Vec<Array1<f64>>,
    /// `V⁽ˡ⁾` for all layers, output last.
    v: Vec<Array2<f64>>,
}

impl PointForward {
    fn new(net: &ReluNet, x: ArrayView1<f64>, label: usize, with_v: bool) -> Self {
        let layers = net.layers();
        let mut pre: Vec<Array1<f64>> = Vec::with_capacity(layers.len());
        let mut v: Vec<Array2<f64>> = Vec::with_capacity(if with_v { layers.len() } else { 0 });
        for (l, layer) in layers.iter().enumerate() {
            let g = if l == 0 {
                layer.weights().dot(&x) + layer.bias()
            } else {
                let h = pre[l - 1].mapv(|t| t.max(0.0));
                layer.weights().dot(&h) + layer.bias()
            };
            if with_v {
                let vl = if l == 0 {
                    layer.weights().clone()
                } else {
                    let mask = mask_of(&pre[l - 1]);
                    let masked = &v[l - 1] * &mask.view().insert_axis(Axis(1));
                    layer.weights().dot(&masked)
                };
                v.push(vl);
            }
            pre.push(g);
        }
        Self {
            label,
            input: x.to_owned(),
            pre,
            v,
        }
    }

    fn logits(&self) -> &Array1<f64> {
        self.pre.last().expect("output layer")
    }

    fn hidden(&self) -> usize {
        self.pre.len() - 1
    }

    /// `(layer, unit, distance)` for every hidden unit; a zero normal gives `+∞`.
    fn boundary(&self, q: NormOrder) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for l in 0..self.hidden() {
            for j in 0..self.pre[l].len() {
                let n = q.norm(self.v[l].row(j));
                let d = if n > 0.0 {
                    self.pre[l][j].abs() / n
                } else {
                    f64::INFINITY
                };
                out.push((l, j, d));
            }
        }
        out
    }

    /// Signed decision distances to every other class. A zero normal gives
    /// `+∞` if the label strictly wins and 0 otherwise.
    fn decision(&self, q: NormOrder) -> Vec<(usize, f64)> {
        let f = self.logits();
        let vo = self.v.last().expect("output map");
        let c = self.label;
        (0..f.len())
            .filter(|&s| s != c)
            .map(|s| {
                let diff = &vo.row(c) - &vo.row(s);
                let n = q.norm(&diff);
                let num = f[c] - f[s];
                let d = if n > 0.0 {
                    num / n
                } else if num > 0.0 {
                    f64::INFINITY
                } else {
                    0.0
                };
                (s, d)
            })
            .collect()
    }
}

fn mask_of(g: &Array1<f64>) -> Array1<f64> {
    g.mapv(|t| if t > 0.0 { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy)]
enum TermKind {
    Boundary { layer: usize, unit: usize },
    Decision { class: usize },
}

/// `coef · d` where `d` is one distance measured with dual norm `q`.
#[derive(Debug, Clone, Copy)]
struct Term {
    kind: TermKind,
    q: NormOrder,
    coef: f64,
}

/// Discrete state frozen by the gradient: patterns, bottom-k sets and
/// active hinges. Equal structures at two parameter values mean the loss is
/// smooth between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalStructure {
    parts: Vec<Vec<i64>>,
}

struct HingeSet {
    value: f64,
    terms: Vec<Term>,
    structure: Vec<i64>,
}

fn bottom_k_hinges(
    fw: &PointForward,
    lambda: f64,
    gamma: f64,
    p: NormOrder,
    k_boundary: usize,
    out: &mut HingeSet,
) {
    let q = p.dual();
    let bd = fw.boundary(q);
    let k = k_boundary.min(bd.len());
    if k > 0 {
        let dists: Vec<f64> = bd.iter().map(|b| b.2).collect();
        for i in bottom_k(&dists, k) {
            let (layer, unit, d) = bd[i];
            out.structure.push(i as i64);
            let u = d / gamma;
            if u < 1.0 {
                out.value += lambda / k as f64 * hinge(u);
                out.terms.push(Term {
                    kind: TermKind::Boundary { layer, unit },
                    q,
                    coef: -lambda / (k as f64 * gamma),
                });
                out.structure.push(1);
            } else {
                out.structure.push(0);
            }
        }
    }
    let dd = fw.decision(q);
    let m = dd.len();
    for &(class, d) in &dd {
        let u = d / gamma;
        if u < 1.0 {
            out.value += lambda / m as f64 * hinge(u);
            if has_decision_normal(fw, class, q) {
                out.terms.push(Term {
                    kind: TermKind::Decision { class },
                    q,
                    coef: -lambda / (m as f64 * gamma),
                });
            }
            out.structure.push(1);
        } else {
            out.structure.push(0);
        }
    }
}

fn has_decision_normal(fw: &PointForward, class: usize, q: NormOrder) -> bool {
    let vo = fw.v.last().expect("output map");
    q.norm(&(&vo.row(fw.label) - &vo.row(class))) > 0.0
}

fn universal_hinges(fw: &PointForward, params: &RegularizerParams) -> HingeSet {
    let mut set = HingeSet {
        value: 0.0,
        terms: Vec::new(),
        structure: Vec::new(),
    };
    if params.lambda1 != 0.0 {
        bottom_k_hinges(fw, params.lambda1, params.gamma1, NormOrder::ONE, params.k_boundary, &mut set);
    }
    if params.lambda_inf != 0.0 {
        bottom_k_hinges(fw, params.lambda_inf, params.gamma_inf, NormOrder::INF, params.k_boundary, &mut set);
    }
    set
}

fn check_point(net: &ReluNet, x: ArrayView1<f64>, label: usize) -> Result<()> {
    if x.len() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            found: x.len(),
        });
    }
    if label >= net.num_classes() {
        return Err(Error::input(format!("label {label} out of range")));
    }
    Ok(())
}

/// Single-norm bottom-k hinge regularizer with signed decision distances.
pub fn mmr_lp(net: &ReluNet, x: ArrayView1<f64>, label: usize, cfg: &MmrLpConfig) -> Result<f64> {
    check_point(net, x, label)?;
    cfg.validate(net)?;
    let fw = PointForward::new(net, x, label, true);
    let q = cfg.p.dual();
    let bd: Vec<f64> = fw.boundary(q).iter().map(|b| b.2).collect();
    let dd: Vec<f64> = fw.decision(q).iter().map(|d| d.1).collect();
    let kb = cfg.k_boundary;
    let kd = cfg.k_decision;
    let boundary: f64 = bottom_k(&bd, kb)
        .iter()
        .map(|&i| hinge(bd[i] / cfg.gamma_boundary))
        .sum::<f64>()
        / kb as f64;
    let decision: f64 = bottom_k(&dd, kd)
        .iter()
        .map(|&i| hinge(dd[i] / cfg.gamma_decision))
        .sum::<f64>()
        / kd as f64;
    Ok(boundary + decision)
}

/// The l1 + l∞ regularizer at one point.
pub fn mmr_universal(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    params: &RegularizerParams,
) -> Result<f64> {
    check_point(net, x, label)?;
    let fw = PointForward::new(net, x, label, true);
    Ok(universal_hinges(&fw, params).value)
}

/// Numerically stable `log Σ exp(f) - f_label`.
pub fn cross_entropy(logits: ArrayView1<f64>, label: usize) -> f64 {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + logits.iter().map(|&f| (f - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|f| (f - m).exp());
    let s = e.sum();
    e / s
}

fn check_batch(net: &ReluNet, xs: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if xs.nrows() != labels.len() {
        return Err(Error::Dimension {
            expected: xs.nrows(),
            found: labels.len(),
        });
    }
    if xs.nrows() == 0 {
        return Err(Error::domain("empty batch"));
    }
    if xs.ncols() != net.input_dim() {
        return Err(Error::Dimension {
            expected: net.input_dim(),
            found: xs.ncols(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= net.num_classes()) {
        return Err(Error::input(format!("label {bad} out of range")));
    }
    Ok(())
}

fn active(params: Option<&RegularizerParams>) -> Option<&RegularizerParams> {
    params.filter(|p| p.is_active())
}

fn point_loss(net: &ReluNet, x: ArrayView1<f64>, label: usize, reg: Option<&RegularizerParams>) -> f64 {
    match reg {
        None => cross_entropy(net.logits(x).expect("checked").view(), label),
        Some(params) => {
            let fw = PointForward::new(net, x, label, true);
            cross_entropy(fw.logits().view(), label) + universal_hinges(&fw, params).value
        }
    }
}

/// Mean over the batch of cross-entropy plus the regularizer (if any).
pub fn loss(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    params: Option<&RegularizerParams>,
) -> Result<f64> {
    check_batch(net, xs, labels)?;
    let reg = active(params);
    let per: Vec<f64> = (0..labels.len())
        .into_par_iter()
        .map(|i| point_loss(net, xs.row(i), labels[i], reg))
        .collect();
    Ok(per.iter().sum::<f64>() / labels.len() as f64)
}

/// Discrete structure the gradient treats as constant.
pub fn local_structure(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    params: Option<&RegularizerParams>,
) -> Result<LocalStructure> {
    check_batch(net, xs, labels)?;
    let reg = active(params);
    let mut parts = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        let fw = PointForward::new(net, xs.row(i), y, reg.is_some());
        let mut part: Vec<i64> = fw.pre[..fw.hidden()]
            .iter()
            .flat_map(|g| g.iter().map(|&t| i64::from(t > 0.0)))
            .collect();
        if let Some(params) = reg {
            part.extend(universal_hinges(&fw, params).structure);
        }
        parts.push(part);
    }
    Ok(LocalStructure { parts })
}

fn point_gradient(
    net: &ReluNet,
    x: ArrayView1<f64>,
    label: usize,
    reg: Option<&RegularizerParams>,
) -> (f64, Gradients) {
    let fw = PointForward::new(net, x, label, reg.is_some());
    let logits = fw.logits();
    let mut value = cross_entropy(logits.view(), label);
    let nl = fw.pre.len();
    let mut g_adj: Vec<Array1<f64>> = fw.pre.iter().map(|g| Array1::zeros(g.len())).collect();
    let mut v_adj: Vec<Array2<f64>> = Vec::new();

    let mut probs = softmax(logits);
    probs[label] -= 1.0;
    g_adj[nl - 1] += &probs;

    if let Some(params) = reg {
        v_adj = fw.v.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        let set = universal_hinges(&fw, params);
        value += set.value;
        let mut sg = vec![0.0; x.len()];
        for term in &set.terms {
            match term.kind {
                TermKind::Boundary { layer, unit } => {
                    let row = fw.v[layer].row(unit);
                    let g = fw.pre[layer][unit];
                    let n = term.q.norm(row);
                    g_adj[layer][unit] += term.coef * sign(g) / n;
                    term.q.norm_subgradient(row.as_slice().expect("row-major"), &mut sg);
                    let s = -term.coef * g.abs() / (n * n);
                    v_adj[layer].row_mut(unit).scaled_add(s, &ArrayView1::from(&sg[..]));
                }
                TermKind::Decision { class } => {
                    let vo = &fw.v[nl - 1];
                    let diff = &vo.row(label) - &vo.row(class);
                    let n = term.q.norm(&diff);
                    let num = logits[label] - logits[class];
                    g_adj[nl - 1][label] += term.coef / n;
                    g_adj[nl - 1][class] -= term.coef / n;
                    term.q.norm_subgradient(diff.as_slice().expect("contiguous"), &mut sg);
                    let s = -term.coef * num / (n * n);
                    let sgv = ArrayView1::from(&sg[..]);
                    v_adj[nl - 1].row_mut(label).scaled_add(s, &sgv);
                    v_adj[nl - 1].row_mut(class).scaled_add(-s, &sgv);
                }
            }
        }
    }

    let mut grads = Gradients::zeros_like(net);
    for l in (0..nl).rev() {
        let w = net.layers()[l].weights();
        let input = if l == 0 {
            fw.input.clone()
        } else {
            fw.pre[l - 1].mapv(|t| t.max(0.0))
        };
        let ga = g_adj[l].clone();
        grads.weights[l] += &ga
            .view()
            .insert_axis(Axis(1))
            .dot(&input.view().insert_axis(Axis(0)));
        grads.biases[l] += &ga;
        let has_v = !v_adj.is_empty();
        if l == 0 {
            if has_v {
                grads.weights[0] += &v_adj[0];
            }
            continue;
        }
        let mask = mask_of(&fw.pre[l - 1]);
        let back = w.t().dot(&ga) * &mask;
        g_adj[l - 1] += &back;
        if has_v {
            let mcol = mask.view().insert_axis(Axis(1));
            let masked_prev = &fw.v[l - 1] * &mcol;
            grads.weights[l] += &v_adj[l].dot(&masked_prev.t());
            let back_v = w.t().dot(&v_adj[l]) * &mcol;
            v_adj[l - 1] += &back_v;
        }
    }
    (value, grads)
}

/// Loss and its gradient, averaged over the batch.
///
/// Points are processed in parallel and reduced sequentially in batch
/// order, so the result does not depend on the thread count.
pub fn loss_gradient(
    net: &ReluNet,
    xs: ArrayView2<f64>,
    labels: &[usize],
    params: Option<&RegularizerParams>,
) -> Result<(f64, Gradients)> {
    check_batch(net, xs, labels)?;
    let reg = active(params);
    let per: Vec<(f64, Gradients)> = (0..labels.len())
        .into_par_iter()
        .map(|i| point_gradient(net, xs.row(i), labels[i], reg))
        .collect();
    let mut total = Gradients::zeros_like(net);
    let mut value = 0.0;
    for (v, g) in &per {
        value += v;
        total.add_assign(g);
    }
    let inv = 1.0 / labels.len() as f64;
    total.scale(inv);
    Ok((value * inv, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Layer;
    use crate::seed;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(lambda1: f64, lambda_inf: f64, gamma1: f64, gamma_inf: f64, k: usize) -> RegularizerParams {
        RegularizerParams {
            lambda1,
            lambda_inf,
            gamma1,
            gamma_inf,
            k_boundary: k,
        }
    }

    /// One hidden unit with `V = 1` and `g = 0.5`: `d_1 = 0.5`, `d_∞ = 0.05`.
    fn single_unit_net() -> ReluNet {
        ReluNet::new(vec![
            Layer::new(Array2::ones((1, 10)), array![0.5]).unwrap(),
            Layer::new(array![[1.0], [0.0]], array![1.0, 0.0]).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn hand_evaluated_regularizer() {
        let net = single_unit_net();
        let x = Array1::zeros(10);
        // decision normals are (1, ..., 1): d_1 = 1.5/1, d_∞ = 1.5/10 ≥ both γ
        let r = mmr_universal(&net, x.view(), 0, &params(1.0, 2.0, 1.0, 0.1, 1)).unwrap();
        assert!((r - 1.5).abs() < 1e-12, "{r}");
    }

    #[test]
    fn hinges_vanish_beyond_margins() {
        let net = single_unit_net();
        let x = Array1::zeros(10);
        let r = mmr_universal(&net, x.view(), 0, &params(1.0, 2.0, 0.4, 0.04, 1)).unwrap();
        assert_eq!(r, 0.0);
        let (_, g) = loss_gradient(
            &net,
            x.view().insert_axis(Axis(0)),
            &[0],
            Some(&params(1.0, 2.0, 0.4, 0.04, 1)),
        )
        .unwrap();
        let (_, plain) = loss_gradient(&net, x.view().insert_axis(Axis(0)), &[0], None).unwrap();
        assert_eq!(g, plain);
    }

    #[test]
    fn misclassified_point_pays_more_than_the_lambdas() {
        let net = single_unit_net();
        let x = Array1::zeros(10);
        let p = params(1.0, 2.0, 0.4, 0.04, 1);
        let r = mmr_universal(&net, x.view(), 1, &p).unwrap();
        assert!(r > p.lambda1 + p.lambda_inf);
    }

    #[test]
    fn mmr_lp_half_margin() {
        let net = single_unit_net();
        let x = Array1::zeros(10);
        let cfg = MmrLpConfig {
            p: NormOrder::ONE,
            k_boundary: 1,
            k_decision: 1,
            gamma_boundary: 1.0,
            gamma_decision: 1.0,
        };
        let r = mmr_lp(&net, x.view(), 0, &cfg).unwrap();
        assert!((r - 0.5).abs() < 1e-12);
        let bad = MmrLpConfig { k_boundary: 2, ..cfg };
        assert!(mmr_lp(&net, x.view(), 0, &bad).is_err());
    }

    /// Reference: collect every hinge value, sort with a different algorithm.
    fn slow_mmr_lp(net: &ReluNet, x: ArrayView1<f64>, label: usize, cfg: &MmrLpConfig) -> f64 {
        let region = net.region_description(x).unwrap();
        let q = cfg.p.dual();
        let mut bd: Vec<(f64, usize)> = region
            .halfspaces()
            .iter()
            .enumerate()
            .map(|(i, h)| (h.normal.dot(&x) + h.offset, i, q.norm(&h.normal)))
            .map(|(g, i, n)| (g.abs() / n, i))
            .collect();
        // insertion sort, ties by index
        for i in 1..bd.len() {
            let mut j = i;
            while j > 0 && (bd[j - 1].0 > bd[j].0 || bd[j - 1].0 == bd[j].0 && bd[j - 1].1 > bd[j].1) {
                bd.swap(j - 1, j);
                j -= 1;
            }
        }
        let out = region.output_map();
        let f = out.apply(x);
        let mut dd: Vec<f64> = (0..f.len())
            .filter(|&s| s != label)
            .map(|s| (f[label] - f[s]) / q.norm(&(&out.linear.row(label) - &out.linear.row(s))))
            .collect();
        dd.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let b: f64 = bd[..cfg.k_boundary].iter().map(|d| hinge(d.0 / cfg.gamma_boundary)).sum();
        let d: f64 = dd[..cfg.k_decision].iter().map(|d| hinge(d / cfg.gamma_decision)).sum();
        b / cfg.k_boundary as f64 + d / cfg.k_decision as f64
    }

    #[test]
    fn mmr_lp_matches_reference() {
        let mut rng = seed::rng(7, seed::purpose::INIT, 0);
        for trial in 0..20 {
            let net = ReluNet::random(3, &[6, 5], 4, &mut rng).unwrap();
            let x = Array1::from_shape_fn(3, |_| rng.random_range(-1.0..1.0));
            for p in [NormOrder::ONE, NormOrder::TWO, NormOrder::INF, NormOrder::Finite(3.0)] {
                let cfg = MmrLpConfig {
                    p,
                    k_boundary: 1 + trial % 11,
                    k_decision: 1 + trial % 3,
                    gamma_boundary: 0.8,
                    gamma_decision: 1.5,
                };
                let a = mmr_lp(&net, x.view(), trial % 4, &cfg).unwrap();
                let b = slow_mmr_lp(&net, x.view(), trial % 4, &cfg);
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_logits_cost_ln_k() {
        let net = ReluNet::new(vec![Layer::new(Array2::zeros((5, 3)), Array1::zeros(5)).unwrap()])
            .unwrap();
        let xs = Array2::from_elem((4, 3), 0.3);
        let l = loss(&net, xs.view(), &[0, 1, 2, 4], None).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn plain_gradient_of_a_linear_model() {
        // logits = W x + b with W = 0: softmax is uniform
        let net = ReluNet::new(vec![Layer::new(Array2::zeros((2, 2)), Array1::zeros(2)).unwrap()])
            .unwrap();
        let xs = array![[1.0, 2.0]];
        let (_, g) = loss_gradient(&net, xs.view(), &[0], None).unwrap();
        assert_eq!(g.biases[0], array![-0.5, 0.5]);
        assert_eq!(g.weights[0], array![[-0.5, -1.0], [0.5, 1.0]]);
    }

    #[test]
    fn batch_loss_is_the_mean_of_point_losses() {
        let mut rng = seed::rng(3, seed::purpose::INIT, 0);
        let net = ReluNet::random(4, &[8], 3, &mut rng).unwrap();
        let xs = Array2::from_shape_fn((7, 4), |_| rng.random_range(0.0..1.0));
        let labels = [0, 1, 2, 0, 1, 2, 0];
        let p = params(1.0, 3.0, 2.0, 0.5, 3);
        let batch = loss(&net, xs.view(), &labels, Some(&p)).unwrap();
        let each: f64 = (0..7)
            .map(|i| {
                cross_entropy(net.logits(xs.row(i)).unwrap().view(), labels[i])
                    + mmr_universal(&net, xs.row(i), labels[i], &p).unwrap()
            })
            .sum();
        assert!((batch - each / 7.0).abs() < 1e-12);
    }

    #[test]
    fn schedules() {
        let cfg = MmrUniversalConfig::default();
        assert_eq!(cfg.k_boundary(0, 100, 64), 13);
        assert_eq!(cfg.k_boundary(99, 100, 64), 3);
        assert_eq!(cfg.k_boundary(0, 100, 2), 1);
        assert!((cfg.lambda_scale(0) - 0.1).abs() < 1e-15);
        assert_eq!(cfg.lambda_scale(9), 1.0);
        assert_eq!(cfg.lambda_scale(50), 1.0);
        assert!(cfg.validate(5).is_err());
    }

    fn perturbed(net: &ReluNet, idx: usize, h: f64) -> ReluNet {
        let mut out = net.clone();
        let mut k = idx;
        for l in 0..out.layers().len() {
            let (w, b) = out.layer_params_mut(l);
            if k < w.len() {
                let cols = w.ncols();
                w[[k / cols, k % cols]] += h;
                return out;
            }
            k -= w.len();
            if k < b.len() {
                b[k] += h;
                return out;
            }
            k -= b.len();
        }
        unreachable!("parameter index out of range")
    }

    /// Largest relative error against central differences, or `None` if a
    /// kink lies within `10h` of the evaluation point.
    fn fd_error(net: &ReluNet, xs: ArrayView2<f64>, labels: &[usize], p: &RegularizerParams) -> Option<f64> {
        let h = 1e-5;
        let s0 = local_structure(net, xs, labels, Some(p)).unwrap();
        let (_, g) = loss_gradient(net, xs, labels, Some(p)).unwrap();
        let flat = g.flatten();
        let mut worst: f64 = 0.0;
        for (i, &an) in flat.iter().enumerate() {
            for far in [-10.0 * h, 10.0 * h] {
                if local_structure(&perturbed(net, i, far), xs, labels, Some(p)).unwrap() != s0 {
                    return None;
                }
            }
            let up = loss(&perturbed(net, i, h), xs, labels, Some(p)).unwrap();
            let dn = loss(&perturbed(net, i, -h), xs, labels, Some(p)).unwrap();
            let fd = (up - dn) / (2.0 * h);
            worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
        }
        Some(worst)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut checked = 0;
        let mut attempt = 0u64;
        while checked < 3 {
            let mut rng = seed::rng(11, seed::purpose::INIT, attempt);
            attempt += 1;
            let net = ReluNet::random(3, &[5, 4], 3, &mut rng).unwrap();
            let xs = Array2::from_shape_fn((4, 3), |_| rng.random_range(0.0..1.0));
            let labels = [0, 1, 2, 1];
            let p = params(1.0, 3.0, 4.0, 1.0, 4);
            if let Some(err) = fd_error(&net, xs.view(), &labels, &p) {
                assert!(err <= 1e-4, "relative error {err}");
                checked += 1;
            }
            assert!(attempt < 50, "no generic configuration found");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn larger_margins_never_lower_the_regularizer(
            s in 0u64..10_000,
            scale in 1.0f64..5.0,
        ) {
            let mut rng = seed::rng(s, seed::purpose::INIT, 0);
            let net = ReluNet::random(3, &[6], 3, &mut rng).unwrap();
            let x = Array1::from_shape_fn(3, |_| rng.random_range(0.0..1.0));
            let base = params(1.0, 2.0, 0.5, 0.1, 2);
            let wide = RegularizerParams { gamma1: base.gamma1 * scale, gamma_inf: base.gamma_inf * scale, ..base };
            // a negative signed distance makes 1 - d/γ fall as γ grows
            let label = net.classify(x.view()).unwrap();
            let a = mmr_universal(&net, x.view(), label, &base).unwrap();
            let b = mmr_universal(&net, x.view(), label, &wide).unwrap();
            prop_assert!(b >= a - 1e-12, "{} < {}", b, a);
        }

        #[test]
        fn regularizer_is_nonnegative(s in 0u64..10_000, label in 0usize..3) {
            let mut rng = seed::rng(s, seed::purpose::INIT, 1);
            let net = ReluNet::random(2, &[4, 4], 3, &mut rng).unwrap();
            let x = Array1::from_shape_fn(2, |_| rng.random_range(0.0..1.0));
            let r = mmr_universal(&net, x.view(), label, &params(1.0, 1.0, 1.0, 0.1, 3)).unwrap();
            prop_assert!(r >= 0.0);
        }
    }
}
