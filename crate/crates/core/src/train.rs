//! Mini-batch training with Adam and the regularizer schedules.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::certify::certify_dataset;
use crate::data::Dataset;
use crate::mmr::{loss_gradient, Gradients, MmrUniversalConfig, RegularizerParams};
use crate::net::ReluNet;
use crate::norm::NormOrder;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// The learning rate is divided by this for the last `lr_drop_epochs`.
    pub lr_drop_factor: f64,
    pub lr_drop_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Points of the evaluation set used for the per-epoch certificate means.
    pub monitor_points: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 5e-4,
            lr_drop_factor: 10.0,
            lr_drop_epochs: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            monitor_points: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::domain("epochs and batch size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.lr_drop_factor > 0.0 && self.adam_eps > 0.0) {
            return Err(Error::domain("learning rate, drop factor and eps must be positive"));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::domain("Adam betas must be in [0, 1)"));
        }
        Ok(())
    }

    /// Learning rate at `epoch`; the drop only applies when training is
    /// longer than the drop window.
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if self.epochs > self.lr_drop_epochs && epoch >= self.epochs - self.lr_drop_epochs {
            self.learning_rate / self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub learning_rate: f64,
    pub k_boundary: usize,
    pub lambda1: f64,
    pub lambda_inf: f64,
    pub test_error: f64,
    pub mean_rho1: f64,
    pub mean_rho_inf: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for rec in &self.epochs {
            w.serialize(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

impl Adam {
    fn new(net: &ReluNet) -> Self {
        Self {
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut ReluNet, g: &Gradients, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            p - lr * (*m / c1) / ((*v / c2).sqrt() + cfg.adam_eps)
        };
        for l in 0..net.layers().len() {
            let (w, b) = net.layer_params_mut(l);
            ndarray::Zip::from(w)
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, &g| *p = update(*p, m, v, g));
            ndarray::Zip::from(b)
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, &g| *p = update(*p, m, v, g));
        }
    }
}

/// Fraction of misclassified points.
pub fn test_error(net: &ReluNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::domain("empty dataset"));
    }
    let mut wrong = 0usize;
    for (i, &y) in data.labels().iter().enumerate() {
        if net.classify(data.row(i))? != y {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / data.len() as f64)
}

fn mean_radii(net: &ReluNet, data: &Dataset, n: usize) -> Result<(f64, f64)> {
    let head = data.head(n);
    if head.is_empty() {
        return Ok((0.0, 0.0));
    }
    let certs = certify_dataset(net, head.features(), head.labels())?;
    let m = certs.len() as f64;
    Ok((
        certs.iter().map(|c| c.universal(NormOrder::ONE)).sum::<f64>() / m,
        certs.iter().map(|c| c.universal(NormOrder::INF)).sum::<f64>() / m,
    ))
}

fn gather(data: &Dataset, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
    (
        data.features().select(Axis(0), idx),
        idx.iter().map(|&i| data.labels()[i]).collect(),
    )
}

/// Trains a copy of `net0`. Without `mmr` (or with both lambdas zero) the
/// loss is plain cross-entropy.
///
/// `eval` feeds the per-epoch test error and certificate means; the
/// training set is used when it is absent.
pub fn train(
    net0: &ReluNet,
    data: &Dataset,
    eval: Option<&Dataset>,
    mmr: Option<&MmrUniversalConfig>,
    cfg: &TrainConfig,
) -> Result<(ReluNet, History)> {
    cfg.validate()?;
    if let Some(m) = mmr {
        m.validate(cfg.epochs)?;
    }
    if data.is_empty() {
        return Err(Error::domain("empty training set"));
    }
    if data.dim() != net0.input_dim() || data.num_classes() > net0.num_classes() {
        return Err(Error::input(format!(
            "dataset (d={}, K={}) does not fit the network (d={}, K={})",
            data.dim(),
            data.num_classes(),
            net0.input_dim(),
            net0.num_classes()
        )));
    }
    let eval = eval.unwrap_or(data);
    let mut net = net0.clone();
    let mut adam = Adam::new(&net);
    let mut history = History::default();
    let hidden_units = net.total_hidden_units();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let params: Option<RegularizerParams> =
            mmr.map(|m| m.params_at(epoch, cfg.epochs, hidden_units));
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = seed::rng(cfg.seed, seed::purpose::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (xs, ys) = gather(data, chunk);
            let (value, grads) = loss_gradient(&net, xs.view(), &ys, params.as_ref())?;
            if !value.is_finite() || grads.flatten().iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "loss {value} at epoch {epoch}, batch {b} (lr {lr}, params {params:?})"
                )));
            }
            total += value * chunk.len() as f64;
            adam.step(&mut net, &grads, lr, cfg);
        }
        let loss = total / data.len() as f64;
        let err = test_error(&net, eval)?;
        let (mean_rho1, mean_rho_inf) = mean_radii(&net, eval, cfg.monitor_points)?;
        debug!(epoch, loss, err, mean_rho1, mean_rho_inf, "epoch finished");
        history.epochs.push(EpochRecord {
            epoch,
            loss,
            learning_rate: lr,
            k_boundary: params.map_or(0, |p| p.k_boundary),
            lambda1: params.map_or(0.0, |p| p.lambda1),
            lambda_inf: params.map_or(0.0, |p| p.lambda_inf),
            test_error: err,
            mean_rho1,
            mean_rho_inf,
        });
    }
    if let Some(last) = history.epochs.last() {
        info!(loss = last.loss, test_error = last.test_error, "training finished");
    }
    Ok((net, history))
}

/// Per-point certified radii `(ρ₁, ρ∞)`, zero where misclassified.
pub fn radii(net: &ReluNet, data: &Dataset) -> Result<(Array1<f64>, Array1<f64>)> {
    let certs = certify_dataset(net, data.features(), data.labels())?;
    Ok((
        certs.iter().map(|c| c.universal(NormOrder::ONE)).collect(),
        certs.iter().map(|c| c.universal(NormOrder::INF)).collect(),
    ))
}
