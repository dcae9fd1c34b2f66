//! Masked autoregressive flows.
//!
//! A model is a stack of MADE layers, each preceded by a fixed permutation.
//! Data-to-latent (`inverse`) runs the layers in stack order and costs one
//! network evaluation per layer; latent-to-data (`forward`) runs them in
//! reverse and generates coordinates one at a time.
//!
//! Within a layer with order `π`, the input `u` is gathered as `u'_j = u[π_j]`,
//! transformed autoregressively, and the result scattered back so that
//! `z[π_j] = z'_j`.

mod file;
mod fused;

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ColumnTransform};
use crate::error::{Error, Result};
use crate::made::{power_iteration, MadeParams};
use crate::numerics::{adam_step, AdamConfig, AdamState, GradTape, Tensor};
use crate::rng;

pub use file::{load, read_model, save, write_model, FORMAT_VERSION, MAGIC};
pub use fused::nll_with_gradients;

/// `log(2π) / 2`
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

const POWER_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowLayer {
    /// `order[j]` is the data coordinate this layer treats as its `j`-th.
    pub order: Vec<usize>,
    pub made: MadeParams,
}

/// Column names and fitted transforms of the data a model was trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelColumns {
    pub names: Vec<String>,
    pub transforms: Vec<ColumnTransform>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MafModel {
    pub layers: Vec<FlowLayer>,
    pub columns: Option<ModelColumns>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_sizes: Vec<usize>,
    pub n_flows: usize,
}

impl Default for Architecture {
    /// One hidden layer of 50 units, five flow layers.
    fn default() -> Self {
        Architecture {
            hidden_sizes: vec![50],
            n_flows: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Extra steps to run after the validation loss last improved.
    pub patience: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub spectral_norm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-3,
            max_iters: 500,
            patience: 100,
            validation_fraction: 0.0,
            seed: 0,
            spectral_norm: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean NLL on the training rows before each step.
    pub train_loss: Vec<f64>,
    /// Mean NLL on the validation rows before each step (empty without validation).
    pub val_loss: Vec<f64>,
    /// Step whose parameters were returned.
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Per-layer coordinate orders for a stack of `n_layers` on `d` coordinates.
///
/// For `d ≤ 3` layer `ℓ` rotates by `ℓ` (so `(1,2,3)`, `(3,1,2)`, `(2,3,1)`, …).
/// Larger `d` uses the identity first, then seeded shuffles; a shuffle that
/// starts with the previous layer's first coordinate is rotated by one.
pub fn layer_orders(d: usize, n_layers: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let order = if d <= 3 || l == 0 {
            (0..d).map(|j| (j + d - l % d) % d).collect()
        } else {
            let mut p: Vec<usize> = (0..d).collect();
            p.shuffle(&mut rng::stream(seed, l as u64));
            if p[0] == orders[l - 1][0] {
                p.rotate_left(1);
            }
            p
        };
        orders.push(order);
    }
    orders
}

fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (j, &o) in order.iter().enumerate() {
        inv[o] = j;
    }
    inv
}

fn check_permutation(order: &[usize], d: usize) -> Result<()> {
    let mut seen = vec![false; d];
    if order.len() != d || order.iter().any(|&o| o >= d || std::mem::replace(&mut seen[o], true)) {
        return Err(Error::Contract(format!("{order:?} is not a permutation of 0..{d}")));
    }
    Ok(())
}

impl MafModel {
    pub fn new(layers: Vec<FlowLayer>) -> Result<Self> {
        let d = layers
            .first()
            .map(|l| l.made.d())
            .ok_or_else(|| Error::Contract("a flow needs at least one layer".into()))?;
        for layer in &layers {
            if layer.made.d() != d {
                return Err(Error::Dimension {
                    op: "MafModel::new",
                    left: vec![layer.made.d()],
                    right: vec![d],
                });
            }
            check_permutation(&layer.order, d)?;
        }
        Ok(MafModel {
            layers,
            columns: None,
        })
    }

    /// Freshly initialized model; layer `ℓ` uses mask seed `ℓ`.
    pub fn init(d: usize, arch: &Architecture, seed: u64) -> Result<Self> {
        if arch.n_flows == 0 {
            return Err(Error::Contract("n_flows must be at least 1".into()));
        }
        let mut init_rng = rng::stream(rng::derive_seed(seed, 0), 0);
        let orders = layer_orders(d, arch.n_flows, rng::derive_seed(seed, 1));
        let layers = orders
            .into_iter()
            .enumerate()
            .map(|(l, order)| {
                Ok(FlowLayer {
                    order,
                    made: MadeParams::init(d, &arch.hidden_sizes, l as u64, &mut init_rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MafModel::new(layers)
    }

    /// All-zero networks (μ = 0, σ = 1) with identity orders: the identity map.
    pub fn identity(d: usize, n_layers: usize, hidden_sizes: &[usize]) -> Result<Self> {
        let layers = (0..n_layers.max(1))
            .map(|l| {
                Ok(FlowLayer {
                    order: (0..d).collect(),
                    made: MadeParams::zeros(d, hidden_sizes, l as u64)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        MafModel::new(layers)
    }

    pub fn d(&self) -> usize {
        self.layers[0].made.d()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            hidden_sizes: self.layers[0].made.hidden_sizes(),
            n_flows: self.layers.len(),
        }
    }

    fn check_batch(&self, x: &Tensor, op: &'static str) -> Result<()> {
        if !x.is_matrix() || x.cols() != self.d() {
            return Err(Error::Dimension {
                op,
                left: x.shape().to_vec(),
                right: vec![self.d()],
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("{op} input")));
        }
        Ok(())
    }

    /// Data → latent for a batch; returns `z` and the per-row log-determinant.
    pub fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        self.check_batch(x, "inverse")?;
        let (n, d) = (x.rows(), x.cols());
        let mut u = x.clone();
        let mut logdet = vec![0.0; n];
        for (l, layer) in self.layers.iter().enumerate() {
            let gathered = u.select_cols(&layer.order)?;
            let (mu, ls) = layer.made.forward_batch(&gathered).map_err(|e| name_layer(e, l))?;
            let out = u.data_mut();
            for i in 0..n {
                for (j, &o) in layer.order.iter().enumerate() {
                    let k = i * d + j;
                    out[i * d + o] = (gathered.data()[k] - mu.data()[k]) * crate::numerics::exp(-ls.data()[k]);
                    logdet[i] -= ls.data()[k];
                }
            }
            if !u.all_finite() {
                return Err(Error::NonFinite(format!("inverse, layer {l}")));
            }
        }
        Ok((u, logdet))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, logdet) = self.inverse_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok((z.into_data(), logdet[0]))
    }

    /// Latent → data for a batch, generating coordinates sequentially.
    pub fn forward_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.check_batch(z, "forward")?;
        let (n, d) = (z.rows(), z.cols());
        let mut cur = z.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let zg = cur.select_cols(&layer.order)?;
            let mut ug = Tensor::zeros(vec![n, d]);
            for i in 0..d {
                // output i only reads coordinates < i, which are already final
                let (mu, ls) = layer.made.forward_batch(&ug).map_err(|e| name_layer(e, l))?;
                let data = ug.data_mut();
                for r in 0..n {
                    let k = r * d + i;
                    data[k] = mu.data()[k] + crate::numerics::exp(ls.data()[k]) * zg.data()[k];
                }
            }
            let out = cur.data_mut();
            for r in 0..n {
                for (j, &o) in layer.order.iter().enumerate() {
                    out[r * d + o] = ug.data()[r * d + j];
                }
            }
            if !cur.all_finite() {
                return Err(Error::NonFinite(format!("forward, layer {l}")));
            }
        }
        Ok(cur)
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?.into_data())
    }

    pub fn log_prob_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        let (z, logdet) = self.inverse_batch(x)?;
        let d = self.d();
        Ok(logdet
            .iter()
            .enumerate()
            .map(|(i, ld)| {
                let sq: f64 = z.row(i).iter().map(|v| v * v).sum();
                -0.5 * sq - d as f64 * HALF_LOG_2PI + ld
            })
            .collect())
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        Ok(self.log_prob_batch(&Tensor::matrix(1, x.len(), x.to_vec())?)?[0])
    }

    pub fn mean_nll(&self, x: &Tensor) -> Result<f64> {
        let lp = self.log_prob_batch(x)?;
        Ok(-lp.iter().sum::<f64>() / lp.len().max(1) as f64)
    }

    /// `m` draws in model units; row `i` uses latent noise stream `i` of `seed`.
    pub fn sample(&self, m: usize, seed: u64) -> Result<Tensor> {
        if m == 0 {
            return Err(Error::Contract("sample size must be at least 1".into()));
        }
        self.forward_batch(&rng::gaussian_rows(seed, m, self.d()))
    }

    fn param_tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| l.made.tensors().into_iter().cloned())
            .collect()
    }

    fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.made.tensors_mut()).collect()
    }
}

fn name_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what}, layer {layer}")),
        other => other,
    }
}

/// Mean NLL of `data` and its gradient with respect to every parameter
/// tensor, layer by layer in [`MadeParams::tensors`] order.
///
/// Reference implementation on the autodiff tape; training uses the fused
/// [`nll_with_gradients`], which must agree with this one.
pub fn nll_with_gradients_tape(model: &MafModel, data: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    model.check_batch(data, "nll_with_gradients")?;
    let (n, d) = (data.rows(), data.cols());
    let mut tape = GradTape::new();
    let recorded: Vec<_> = model.layers.iter().map(|l| l.made.record(&mut tape)).collect();
    let ones = tape.constant(Tensor::filled(vec![n, 1], 1.0));
    let mut u = tape.constant(data.clone());
    let mut ls_total = None;
    for (layer, nodes) in model.layers.iter().zip(&recorded) {
        let gathered = tape.select_cols(u, &layer.order)?;
        let (mu, ls) = nodes.forward(&mut tape, gathered, ones)?;
        let centered = tape.sub(gathered, mu)?;
        let neg_ls = tape.neg(ls);
        let inv_sigma = tape.exp(neg_ls);
        let zg = tape.mul(centered, inv_sigma)?;
        u = tape.select_cols(zg, &inverse_order(&layer.order))?;
        let s = tape.sum(ls);
        ls_total = Some(match ls_total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let sq = tape.mul(u, u)?;
    let sq = tape.sum(sq);
    let half_sq = tape.scale(sq, 0.5);
    let total = tape.add(half_sq, ls_total.expect("at least one layer"))?;
    let loss = tape.scale(total, 1.0 / n as f64);
    let value = tape.value(loss).item() + d as f64 * HALF_LOG_2PI;

    let mut grads = tape.backward(loss)?;
    let out = recorded
        .iter()
        .flat_map(|r| r.params.iter())
        .map(|&id| grads.take(id).expect("parameters always receive gradients"))
        .collect();
    Ok((value, out))
}

/// Full-batch maximum-likelihood training with Adam.
///
/// `data` must already be in model units. With a validation fraction, the
/// parameters with the lowest validation loss are returned once `patience`
/// steps pass without improvement (or `max_iters` is reached).
pub fn train(data: &Tensor, arch: &Architecture, cfg: &TrainConfig) -> Result<(MafModel, TrainHistory)> {
    let model = MafModel::init(data.cols().max(1), arch, cfg.seed)?;
    train_from(model, data, cfg)
}

/// Like [`train`], starting from the given parameters.
pub fn train_from(mut model: MafModel, data: &Tensor, cfg: &TrainConfig) -> Result<(MafModel, TrainHistory)> {
    validate_config(cfg)?;
    model.check_batch(data, "train")?;
    let (n, d) = (data.rows(), data.cols());
    if n < 2 * d {
        return Err(Error::Input(format!("training needs at least 2·d = {} rows, got {n}", 2 * d)));
    }
    for j in 0..d {
        let col = (0..n).map(|i| data.at(i, j));
        let (lo, hi) = col.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if lo == hi {
            return Err(Error::Degenerate(format!(
                "column {} is constant; apply a transform (or drop it) before training",
                j + 1
            )));
        }
    }

    let (train_rows, val_rows) = if cfg.validation_fraction > 0.0 {
        let (v, t) = dataio::split_indices(n, cfg.validation_fraction, rng::derive_seed(cfg.seed, 2))?;
        (select_rows(data, &t), Some(select_rows(data, &v)))
    } else {
        (data.clone(), None)
    };

    let mut history = TrainHistory::default();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut adam = AdamState::new(&model.param_tensors());
    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut workspace = fused::Workspace::default();
    let mut power_vectors: Vec<Vec<f64>> = Vec::new();
    if cfg.spectral_norm {
        let mut init = rng::stream(rng::derive_seed(cfg.seed, 3), 0);
        for layer in model.layers.iter_mut() {
            for w in layer.made.weight_matrices_mut() {
                power_vectors.push((0..w.cols()).map(|_| StandardNormal.sample(&mut init)).collect());
            }
        }
    }

    for step in 0..cfg.max_iters {
        let (loss, grads) = fused::nll_with_gradients_in(&model, &train_rows, &mut workspace)?;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { step, loss });
        }
        history.train_loss.push(loss);
        if let Some(val) = &val_rows {
            let v = model.mean_nll(val).unwrap_or(f64::INFINITY);
            history.val_loss.push(v);
            if v < best_val {
                best_val = v;
                best = model.clone();
                history.best_step = step;
            } else if step - history.best_step >= cfg.patience {
                history.stopped_early = true;
                history.steps_run = step;
                return Ok((best, history));
            }
        }

        let mut params = model.param_tensors();
        adam_step(&mut params, &grads, &mut adam, &adam_cfg)?;
        for (dst, src) in model.param_tensors_mut().into_iter().zip(params) {
            *dst = src;
        }
        if cfg.spectral_norm {
            let mut k = 0;
            for layer in model.layers.iter_mut() {
                for w in layer.made.weight_matrices_mut() {
                    let sigma = power_iteration(w, &mut power_vectors[k], POWER_ITERS);
                    if sigma > 0.0 {
                        w.data_mut().iter_mut().for_each(|x| *x /= sigma);
                    }
                    k += 1;
                }
            }
        }
        history.steps_run = step + 1;
    }

    if let Some(val) = &val_rows {
        let v = model.mean_nll(val).unwrap_or(f64::INFINITY);
        if v < best_val {
            history.best_step = history.steps_run;
            best = model;
        }
        Ok((best, history))
    } else {
        history.best_step = history.steps_run;
        Ok((model, history))
    }
}

fn validate_config(cfg: &TrainConfig) -> Result<()> {
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Contract(format!("learning rate must be positive, got {}", cfg.learning_rate)));
    }
    if !(0.0..1.0).contains(&cfg.validation_fraction) {
        return Err(Error::Contract(format!(
            "validation fraction must lie in [0, 1), got {}",
            cfg.validation_fraction
        )));
    }
    Ok(())
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let d = x.cols();
    let mut data = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::matrix(rows.len(), d, data).expect("row selection keeps width")
}

/// Standard normal log-density at `z`.
pub fn std_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * z.iter().map(|v| v * v).sum::<f64>() - 0.5 * z.len() as f64 * (2.0 * PI).ln()
}
