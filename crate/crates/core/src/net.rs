//! Fully connected ReLU classifiers and their linear regions.
//!
//! A network with `L` hidden layers computes
//! `g⁽ˡ⁾ = W⁽ˡ⁾ f⁽ˡ⁻¹⁾ + b⁽ˡ⁾`, `f⁽ˡ⁾ = max(0, g⁽ˡ⁾)` with `f⁽⁰⁾ = x`, and
//! outputs `W⁽ᴸ⁺¹⁾ f⁽ᴸ⁾ + b⁽ᴸ⁺¹⁾`. Around any input it is affine on a
//! polytope cut out by one halfspace per hidden unit; [`RegionDescription`]
//! holds that polytope and the affine maps `z ↦ V⁽ˡ⁾ z + a⁽ˡ⁾` of every layer.
//!
//! A network with no hidden layer is allowed and is a plain linear
//! classifier whose region is the whole space.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    weights: Array2<f64>,
    bias: Array1<f64>,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weights.nrows() != bias.len() {
            return Err(Error::Dimension {
                expected: weights.nrows(),
                found: bias.len(),
            });
        }
        if weights.nrows() == 0 || weights.ncols() == 0 {
            return Err(Error::input("layers must have at least one row and one column"));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("layer weights or bias".into()));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn rows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn cols(&self) -> usize {
        self.weights.ncols()
    }
}

/// An immutable fully connected ReLU network. The last layer is the output.
#[derive(Debug, Clone, PartialEq)]
pub struct ReluNet {
    layers: Vec<Layer>,
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    pub logits: Array1<f64>,
    /// `g⁽ˡ⁾(x)` for the hidden layers `l = 1..L`.
    pub preactivations: Vec<Array1<f64>>,
}

impl ReluNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::input("a network needs at least an output layer"));
        }
        for pair in layers.windows(2) {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::Dimension {
                    expected: pair[0].rows(),
                    found: pair[1].cols(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Centered uniform initialisation with scale `1/√fan_in` for weights and biases.
    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_classes);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
                let weights =
                    Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-scale..scale));
                let bias = Array1::from_shape_fn(fan_out, |_| rng.random_range(-scale..scale));
                Layer::new(weights, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layer_params_mut(&mut self, l: usize) -> (&mut Array2<f64>, &mut Array1<f64>) {
        let layer = &mut self.layers[l];
        (&mut layer.weights, &mut layer.bias)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].cols()
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].rows()
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.hidden_layers()].iter().map(Layer::rows).collect()
    }

    /// `N = Σ n_l`, the number of halfspaces describing a linear region.
    pub fn total_hidden_units(&self) -> usize {
        self.hidden_sizes().iter().sum()
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView1<f64>) -> Result<ForwardPass> {
        self.check_input(x)?;
        let mut preactivations = Vec::with_capacity(self.hidden_layers());
        let mut h = x.to_owned();
        for layer in &self.layers[..self.hidden_layers()] {
            let g = layer.weights.dot(&h) + &layer.bias;
            h = g.mapv(|v| v.max(0.0));
            preactivations.push(g);
        }
        let out = self.layers.last().expect("nonempty");
        let logits = out.weights.dot(&h) + &out.bias;
        Ok(ForwardPass {
            logits,
            preactivations,
        })
    }

    pub fn logits(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        Ok(self.forward(x)?.logits)
    }

    /// Predicted class (0-based); ties go to the smallest index.
    pub fn classify(&self, x: ArrayView1<f64>) -> Result<usize> {
        Ok(argmax(self.forward(x)?.logits.view()))
    }

    pub fn activation_pattern(&self, x: ArrayView1<f64>) -> Result<ActivationPattern> {
        let fp = self.forward(x)?;
        Ok(ActivationPattern::from_preactivations(&fp.preactivations))
    }

    pub fn region_description(&self, x: ArrayView1<f64>) -> Result<RegionDescription> {
        let pattern = self.activation_pattern(x)?;
        self.region_for_pattern(&pattern)
    }

    /// Affine maps of every layer under a fixed activation pattern.
    pub fn region_for_pattern(&self, pattern: &ActivationPattern) -> Result<RegionDescription> {
        if pattern.signs.len() != self.hidden_layers() {
            return Err(Error::Dimension {
                expected: self.hidden_layers(),
                found: pattern.signs.len(),
            });
        }
        let mut maps: Vec<AffineMap> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let map = if l == 0 {
                AffineMap {
                    linear: layer.weights.clone(),
                    offset: layer.bias.clone(),
                }
            } else {
                let prev = &maps[l - 1];
                let signs = &pattern.signs[l - 1];
                if signs.len() != prev.linear.nrows() {
                    return Err(Error::Dimension {
                        expected: prev.linear.nrows(),
                        found: signs.len(),
                    });
                }
                let mask = Array1::from_iter(signs.iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }));
                let masked_linear = &prev.linear * &mask.view().insert_axis(Axis(1));
                let masked_offset = &prev.offset * &mask;
                AffineMap {
                    linear: layer.weights.dot(&masked_linear),
                    offset: layer.weights.dot(&masked_offset) + &layer.bias,
                }
            };
            maps.push(map);
        }
        Ok(RegionDescription {
            pattern: pattern.clone(),
            maps,
        })
    }

    /// Backpropagates `∂L/∂logits` to `∂L/∂x`, treating ReLU kinks as inactive.
    pub fn input_gradient(
        &self,
        x: ArrayView1<f64>,
        logit_adjoint: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let fp = self.forward(x)?;
        if logit_adjoint.len() != self.num_classes() {
            return Err(Error::Dimension {
                expected: self.num_classes(),
                found: logit_adjoint.len(),
            });
        }
        let mut adj = logit_adjoint.to_owned();
        for l in (0..self.layers.len()).rev() {
            let back = self.layers[l].weights.t().dot(&adj);
            adj = if l == 0 {
                back
            } else {
                let g = &fp.preactivations[l - 1];
                Array1::from_iter(back.iter().zip(g).map(|(&b, &g)| if g > 0.0 { b } else { 0.0 }))
            };
        }
        Ok(adj)
    }

    pub fn to_model_file(&self) -> ModelFile {
        ModelFile {
            input_dim: self.input_dim(),
            num_classes: self.num_classes(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerFile {
                    rows: l.rows(),
                    cols: l.cols(),
                    weights: l.weights.iter().copied().collect(),
                    bias: l.bias.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_model_file(file: &ModelFile) -> Result<Self> {
        let layers = file
            .layers
            .iter()
            .enumerate()
            .map(|(i, lf)| {
                if lf.weights.len() != lf.rows * lf.cols {
                    return Err(Error::input(format!(
                        "layer {i}: {} weights for a {}x{} matrix",
                        lf.weights.len(),
                        lf.rows,
                        lf.cols
                    )));
                }
                let w = Array2::from_shape_vec((lf.rows, lf.cols), lf.weights.clone())
                    .map_err(|e| Error::input(format!("layer {i}: {e}")))?;
                Layer::new(w, Array1::from_vec(lf.bias.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        let net = Self::new(layers)?;
        if net.input_dim() != file.input_dim {
            return Err(Error::Dimension {
                expected: file.input_dim,
                found: net.input_dim(),
            });
        }
        if net.num_classes() != file.num_classes {
            return Err(Error::Dimension {
                expected: file.num_classes,
                found: net.num_classes(),
            });
        }
        Ok(net)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_model_file())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_model_file(&serde_json::from_str(s)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// On-disk model layout: weights are flat row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Signs of the hidden preactivations, `δ ∈ {-1, 0, +1}` per unit.
///
/// A unit is active (`σ = 1`) iff its sign is `+1`; a zero preactivation
/// counts as inactive.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    signs: Vec<Vec<i8>>,
}

impl ActivationPattern {
    pub fn from_signs(signs: Vec<Vec<i8>>) -> Self {
        Self { signs }
    }

    pub fn from_preactivations(g: &[Array1<f64>]) -> Self {
        let signs = g
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            1
                        } else if v < 0.0 {
                            -1
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        Self { signs }
    }

    pub fn layers(&self) -> usize {
        self.signs.len()
    }

    pub fn signs(&self, layer: usize) -> &[i8] {
        &self.signs[layer]
    }

    pub fn is_active(&self, layer: usize, unit: usize) -> bool {
        self.signs[layer][unit] > 0
    }

    /// The diagonal of `Σ⁽ˡ⁾` as 0/1 floats.
    pub fn mask(&self, layer: usize) -> Vec<f64> {
        self.signs[layer].iter().map(|&s| if s > 0 { 1.0 } else { 0.0 }).collect()
    }

    /// True when no unit sits exactly on its hyperplane.
    pub fn is_strict(&self) -> bool {
        self.signs.iter().flatten().all(|&s| s != 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineMap {
    pub linear: Array2<f64>,
    pub offset: Array1<f64>,
}

impl AffineMap {
    pub fn apply(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.linear.dot(&z) + &self.offset
    }
}

/// One face constraint `orientation · (⟨normal, z⟩ + offset) ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    pub layer: usize,
    pub unit: usize,
    pub normal: Array1<f64>,
    pub offset: f64,
    pub orientation: i8,
}

impl Halfspace {
    pub fn value(&self, z: ArrayView1<f64>) -> f64 {
        f64::from(self.orientation) * (self.normal.dot(&z) + self.offset)
    }
}

/// The linear region `Q(x)` and the affine maps `(V⁽ˡ⁾, a⁽ˡ⁾)`, `l = 1..L+1`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDescription {
    pub pattern: ActivationPattern,
    maps: Vec<AffineMap>,
}

impl RegionDescription {
    /// `(V⁽ˡ⁾, a⁽ˡ⁾)` for every layer, the output map last.
    pub fn maps(&self) -> &[AffineMap] {
        &self.maps
    }

    pub fn hidden_maps(&self) -> &[AffineMap] {
        &self.maps[..self.maps.len() - 1]
    }

    pub fn output_map(&self) -> &AffineMap {
        self.maps.last().expect("at least the output map")
    }

    pub fn num_halfspaces(&self) -> usize {
        self.hidden_maps().iter().map(|m| m.offset.len()).sum()
    }

    pub fn halfspaces(&self) -> Vec<Halfspace> {
        self.hidden_maps()
            .iter()
            .enumerate()
            .flat_map(|(l, m)| {
                let signs = self.pattern.signs(l);
                (0..m.offset.len()).map(move |j| Halfspace {
                    layer: l,
                    unit: j,
                    normal: m.linear.row(j).to_owned(),
                    offset: m.offset[j],
                    orientation: signs[j],
                })
            })
            .collect()
    }

    /// Whether `z` satisfies every halfspace up to `tol`.
    pub fn contains(&self, z: ArrayView1<f64>, tol: f64) -> bool {
        self.halfspaces().iter().all(|h| h.value(z) >= -tol)
    }

    pub fn output(&self, z: ArrayView1<f64>) -> Array1<f64> {
        self.output_map().apply(z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> ReluNet {
        ReluNet::new(vec![
            Layer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap(),
            Layer::new(array![[1.0, -1.0]], array![0.0]).unwrap(),
        ])
        .unwrap()
    }

    /// Layer-by-layer evaluation with explicit loops.
    fn naive_forward(net: &ReluNet, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = net.layers().len();
        for (l, layer) in net.layers().iter().enumerate() {
            let mut out = vec![0.0; layer.rows()];
            for i in 0..layer.rows() {
                let mut s = layer.bias()[i];
                for j in 0..layer.cols() {
                    s += layer.weights()[[i, j]] * h[j];
                }
                out[i] = if l + 1 < n && s < 0.0 { 0.0 } else { s };
            }
            h = out;
        }
        h
    }

    #[test]
    fn identity_hidden_layer() {
        let net = identity_net();
        assert_eq!(net.logits(array![2.0, 1.0].view()).unwrap(), array![1.0]);
        let fp = net.forward(array![-1.0, -1.0].view()).unwrap();
        assert_eq!(fp.logits, array![0.0]);
        assert!(fp.preactivations[0].iter().all(|&g| g < 0.0));
    }

    #[test]
    fn rejects_wrong_input_size() {
        let net = identity_net();
        assert!(matches!(
            net.forward(array![1.0].view()),
            Err(Error::Dimension { expected: 2, found: 1 })
        ));
    }

    #[test]
    fn rejects_broken_chain() {
        let r = ReluNet::new(vec![
            Layer::new(array![[1.0, 0.0]], array![0.0]).unwrap(),
            Layer::new(array![[1.0, 1.0]], array![0.0]).unwrap(),
        ]);
        assert!(r.is_err());
        assert!(Layer::new(array![[f64::NAN]], array![0.0]).is_err());
    }

    #[test]
    fn classify_ties_go_to_first() {
        assert_eq!(argmax(array![1.0, -1.0].view()), 0);
        assert_eq!(argmax(array![0.0, 0.0].view()), 0);
        assert_eq!(argmax(array![0.0, 2.0, 2.0].view()), 1);
    }

    #[test]
    fn pattern_signs() {
        let net = ReluNet::new(vec![
            Layer::new(array![[1.0, 0.0], [0.0, 1.0]], array![0.0, 0.0]).unwrap(),
            Layer::new(array![[1.0, 1.0]], array![0.0]).unwrap(),
        ])
        .unwrap();
        let p = net.activation_pattern(array![2.0, -3.0].view()).unwrap();
        assert_eq!(p.signs(0), &[1, -1]);
        assert_eq!(p.mask(0), vec![1.0, 0.0]);
        let p = net.activation_pattern(array![0.0, 5.0].view()).unwrap();
        assert_eq!(p.signs(0), &[0, 1]);
        assert_eq!(p.mask(0), vec![0.0, 1.0]);
        assert!(!p.is_strict());
    }

    #[test]
    fn region_of_identity_net() {
        let net = identity_net();
        let r = net.region_description(array![2.0, 1.0].view()).unwrap();
        assert_eq!(r.output_map().linear, array![[1.0, -1.0]]);
        assert_eq!(r.output_map().offset, array![0.0]);
        assert_eq!(r.num_halfspaces(), 2);
    }

    #[test]
    fn all_active_net_is_a_product_of_weights() {
        let w1 = array![[1.0, 2.0], [0.5, 1.0], [2.0, 0.1]];
        let w2 = array![[1.0, 0.0, 1.0], [0.2, 0.3, 0.4]];
        let w3 = array![[1.0, -1.0], [0.5, 0.5]];
        let net = ReluNet::new(vec![
            Layer::new(w1.clone(), array![1.0, 1.0, 1.0]).unwrap(),
            Layer::new(w2.clone(), array![1.0, 1.0]).unwrap(),
            Layer::new(w3.clone(), array![0.0, 0.0]).unwrap(),
        ])
        .unwrap();
        let r = net.region_description(array![1.0, 1.0].view()).unwrap();
        assert!(r.pattern.signs(0).iter().chain(r.pattern.signs(1)).all(|&s| s == 1));
        let prod = w3.dot(&w2).dot(&w1);
        for (a, b) in r.output_map().linear.iter().zip(prod.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_naive_interpreter() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let net = ReluNet::random(4, &[7, 5], 3, &mut rng).unwrap();
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let fast = net.logits(ArrayView1::from(&x)).unwrap();
            let slow = naive_forward(&net, &x);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(net.classify(ArrayView1::from(&x)).unwrap(), argmax(fast.view()));
        }
    }

    #[test]
    fn masked_maps_reproduce_every_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ReluNet::random(3, &[6, 6, 4], 3, &mut rng).unwrap();
        let x = array![0.3, -0.7, 1.1];
        let fp = net.forward(x.view()).unwrap();
        let r = net.region_description(x.view()).unwrap();
        for (l, g) in fp.preactivations.iter().enumerate() {
            let via_map = r.hidden_maps()[l].apply(x.view());
            for (a, b) in via_map.iter().zip(g) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let out = r.output(x.view());
        for (a, b) in out.iter().zip(&fp.logits) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(r.contains(x.view(), 0.0));
    }

    #[test]
    fn affine_consistency_inside_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let net = ReluNet::random(3, &[8, 8, 8], 4, &mut rng).unwrap();
        let x = array![0.2, 0.5, -0.4];
        let r = net.region_description(x.view()).unwrap();
        let mut checked = 0;
        let mut radius = 0.5;
        while checked < 100 {
            let z = &x + &Array1::from_shape_fn(3, |_| rng.random_range(-radius..radius));
            if net.activation_pattern(z.view()).unwrap() != r.pattern {
                radius *= 0.99;
                continue;
            }
            let dev = (&net.logits(z.view()).unwrap() - &r.output(z.view()))
                .iter()
                .fold(0.0_f64, |m, v| m.max(v.abs()));
            assert!(dev <= 1e-9, "deviation {dev}");
            checked += 1;
        }
    }

    #[test]
    fn small_perturbation_keeps_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = ReluNet::random(2, &[5], 2, &mut rng).unwrap();
        let x = array![0.1, 0.2];
        let fp = net.forward(x.view()).unwrap();
        let gap = fp.preactivations[0].iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        let wmax = net.layers()[0].weights().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        let step = 0.25 * gap / (2.0 * wmax);
        let z = &x + &array![step, -step];
        assert_eq!(
            net.region_description(x.view()).unwrap(),
            net.region_description(z.view()).unwrap()
        );
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ReluNet::random(3, &[6, 4], 3, &mut rng).unwrap();
        let x = array![0.3, 0.1, -0.2];
        let adj = array![1.0, -0.5, 0.25];
        let g = net.input_gradient(x.view(), adj.view()).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += h;
            b[i] -= h;
            let fa = net.logits(a.view()).unwrap().dot(&adj);
            let fb = net.logits(b.view()).unwrap().dot(&adj);
            assert!(((fa - fb) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn model_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = ReluNet::random(3, &[4], 2, &mut rng).unwrap();
        let back = ReluNet::from_json(&net.to_json().unwrap()).unwrap();
        assert_eq!(net, back);
        let bad = r#"{"input_dim":2,"num_classes":1,"layers":[{"rows":1,"cols":3,"weights":[1,2,3],"bias":[0]}]}"#;
        assert!(ReluNet::from_json(bad).is_err());
    }
}
