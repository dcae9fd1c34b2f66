//! Simulation harness: convergence of the correlation estimator across
//! synthesis mechanisms, and fidelity of meta-analysis on synthetic studies.
//!
//! Every replication derives its own seeds from `(master seed, replication)`,
//! runs single-threaded, and results are reduced in replication order, so
//! outputs do not depend on the worker count.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{split_indices, write_atomic, ColumnTransform, TransformKind};
use crate::error::{Error, Result};
use crate::maf::{select_rows, train, train_from, Architecture, MafModel, TrainConfig};
use crate::meta::{forest_export, random_effects, ForestRow, MetaResult, StudySummary};
use crate::numerics::Tensor;
use crate::rng;
use crate::stats::{cs_corr_mle, ols_fit};
use crate::synth::{direct_noise_inject_with, latent_noise_inject_with, Mechanism, NoiseBank};

/// A run aborts once more than this fraction of its units fail.
pub const MAX_FAILURE_RATE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrStudyConfig {
    pub d: usize,
    pub rho: f64,
    pub sample_sizes: Vec<usize>,
    pub ws: Vec<f64>,
    pub mechanisms: Vec<Mechanism>,
    pub replications: usize,
    pub architecture: Architecture,
    /// Training settings; the seed is replaced per replication.
    pub train: TrainConfig,
    /// Flow-sample size; defaults to the real sample size.
    pub flow_sample_size: Option<usize>,
    pub seed: u64,
}

impl Default for CorrStudyConfig {
    fn default() -> Self {
        CorrStudyConfig {
            d: 5,
            rho: 0.9,
            sample_sizes: vec![2500, 5000, 10000, 20000],
            ws: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            mechanisms: vec![Mechanism::LatentNoise, Mechanism::FlowSample, Mechanism::DirectNoise],
            replications: 25,
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            flow_sample_size: None,
            seed: 0,
        }
    }
}

impl CorrStudyConfig {
    /// The published budget: 100 replications.
    pub fn paper_scale() -> Self {
        CorrStudyConfig {
            replications: 100,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(Error::Contract("correlation study needs d >= 2".into()));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Contract(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        if self.sample_sizes.is_empty() || self.mechanisms.is_empty() || self.replications == 0 {
            return Err(Error::Contract("sample sizes, mechanisms and replications must be non-empty".into()));
        }
        if self.sample_sizes.iter().any(|&n| n < 2 * self.d) {
            return Err(Error::Contract(format!("every sample size must be at least 2·d = {}", 2 * self.d)));
        }
        let needs_w = self.mechanisms.iter().any(|m| *m != Mechanism::FlowSample);
        if needs_w && self.ws.is_empty() {
            return Err(Error::Contract("w grid is empty".into()));
        }
        if self.ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Contract("every w must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Which dataset an estimate was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Real,
    LatentNoise,
    FlowSample,
    DirectNoise,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::LatentNoise => "latent-noise",
            Source::FlowSample => "flow-sample",
            Source::DirectNoise => "direct-noise",
        }
    }
}

impl From<Mechanism> for Source {
    fn from(m: Mechanism) -> Self {
        match m {
            Mechanism::LatentNoise => Source::LatentNoise,
            Mechanism::FlowSample => Source::FlowSample,
            Mechanism::DirectNoise => Source::DirectNoise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrEstimate {
    pub replication: usize,
    pub source: Source,
    /// Absent for the real data and for flow samples.
    pub w: Option<f64>,
    pub n: usize,
    pub rho_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrCell {
    pub source: Source,
    pub w: Option<f64>,
    pub n: usize,
    /// Mean absolute difference from the true ρ.
    pub mad: f64,
    /// Mean of `ρ̂ − ρ`.
    pub bias: f64,
    pub replications: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub source: Source,
    pub w: Option<f64>,
    /// `MAD ∝ n^(−alpha)`
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFailure {
    pub replication: usize,
    /// Sample size (correlation study) or study index (meta study).
    pub unit: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrStudyResult {
    pub cells: Vec<CorrCell>,
    pub rates: Vec<RateFit>,
    pub estimates: Vec<CorrEstimate>,
    pub failures: Vec<UnitFailure>,
}

/// Rows of `N(0, Σ)` with `Σ = (1 − ρ)I + ρ11ᵀ`. Row `i` depends only on
/// `(seed, i)`, so smaller samples are prefixes of larger ones.
pub fn compound_symmetry_sample(n: usize, d: usize, rho: f64, seed: u64) -> Tensor {
    let g = rng::gaussian_rows(seed, n, d + 1);
    let (shared, own) = (rho.sqrt(), (1.0 - rho).sqrt());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = g.row(i);
        data.extend(row[..d].iter().map(|v| shared * row[d] + own * v));
    }
    Tensor::matrix(n, d, data).expect("shape is consistent")
}

fn prefix(x: &Tensor, n: usize) -> Tensor {
    Tensor::matrix(n, x.cols(), x.data()[..n * x.cols()].to_vec()).expect("prefix of a matrix")
}

struct CorrReplication {
    estimates: Vec<CorrEstimate>,
    failures: Vec<UnitFailure>,
}

fn corr_replication(cfg: &CorrStudyConfig, rep: usize) -> Result<CorrReplication> {
    let seed = rng::derive_seed(cfg.seed, rep as u64);
    let n_max = *cfg.sample_sizes.iter().max().expect("validated non-empty");
    let full = compound_symmetry_sample(n_max, cfg.d, cfg.rho, rng::derive_seed(seed, 0));
    let full_bank = NoiseBank::new(rng::derive_seed(seed, 1), n_max, cfg.d);
    let needs_flow = cfg.mechanisms.iter().any(|m| *m != Mechanism::DirectNoise);

    let mut estimates = Vec::new();
    let mut failures = Vec::new();
    for (ni, &n) in cfg.sample_sizes.iter().enumerate() {
        let x = prefix(&full, n);
        let bank = NoiseBank::from_tensor(prefix(full_bank.z(), n));
        let mut push = |source: Source, w: Option<f64>, data: &Tensor| -> Result<()> {
            estimates.push(CorrEstimate {
                replication: rep,
                source,
                w,
                n,
                rho_hat: cs_corr_mle(data)?,
            });
            Ok(())
        };
        push(Source::Real, None, &x)?;

        let model = if needs_flow {
            let tc = TrainConfig {
                seed: rng::derive_seed(seed, 100 + ni as u64),
                ..cfg.train.clone()
            };
            match train(&x, &cfg.architecture, &tc) {
                Ok((m, _)) => Some(m),
                Err(e) if e.is_numeric() => {
                    failures.push(UnitFailure {
                        replication: rep,
                        unit: n,
                        error: e.to_string(),
                    });
                    None
                }
                Err(e) => return Err(e),
            }
        } else {
            None
        };

        for mech in &cfg.mechanisms {
            match mech {
                Mechanism::DirectNoise => {
                    for &w in &cfg.ws {
                        push(Source::DirectNoise, Some(w), &direct_noise_inject_with(&x, w, &bank)?)?;
                    }
                }
                Mechanism::LatentNoise => {
                    if let Some(m) = &model {
                        for &w in &cfg.ws {
                            push(Source::LatentNoise, Some(w), &latent_noise_inject_with(m, &x, w, &bank)?)?;
                        }
                    }
                }
                Mechanism::FlowSample => {
                    if let Some(m) = &model {
                        let size = cfg.flow_sample_size.unwrap_or(n);
                        let s = m.sample(size, rng::derive_seed(seed, 200 + ni as u64))?;
                        push(Source::FlowSample, None, &s)?;
                    }
                }
            }
        }
    }
    Ok(CorrReplication { estimates, failures })
}

fn check_failure_rate(failed: usize, total: usize, what: &str) -> Result<()> {
    if failed as f64 > MAX_FAILURE_RATE * total as f64 {
        return Err(Error::Degenerate(format!(
            "{failed} of {total} {what} failed, more than {:.0}%",
            100.0 * MAX_FAILURE_RATE
        )));
    }
    Ok(())
}

/// Table-shaped cell keys in output order.
fn corr_cell_keys(cfg: &CorrStudyConfig) -> Vec<(Source, Option<f64>)> {
    let mut keys = vec![(Source::Real, None)];
    for mech in &cfg.mechanisms {
        match mech {
            Mechanism::FlowSample => keys.push((Source::FlowSample, None)),
            m => keys.extend(cfg.ws.iter().map(|&w| (Source::from(*m), Some(w)))),
        }
    }
    keys
}

pub fn run_correlation_study(cfg: &CorrStudyConfig) -> Result<CorrStudyResult> {
    cfg.validate()?;
    let reps: Vec<CorrReplication> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| corr_replication(cfg, r))
        .collect::<Result<_>>()?;
    let failures: Vec<UnitFailure> = reps.iter().flat_map(|r| r.failures.clone()).collect();
    check_failure_rate(failures.len(), cfg.replications * cfg.sample_sizes.len(), "flow fits")?;
    let estimates: Vec<CorrEstimate> = reps.into_iter().flat_map(|r| r.estimates).collect();

    let mut cells = Vec::new();
    for (source, w) in corr_cell_keys(cfg) {
        for &n in &cfg.sample_sizes {
            let errs: Vec<f64> = estimates
                .iter()
                .filter(|e| e.source == source && e.w == w && e.n == n)
                .map(|e| e.rho_hat - cfg.rho)
                .collect();
            let k = errs.len();
            let (mad, bias) = if k == 0 {
                (f64::NAN, f64::NAN)
            } else {
                (
                    errs.iter().map(|e| e.abs()).sum::<f64>() / k as f64,
                    errs.iter().sum::<f64>() / k as f64,
                )
            };
            cells.push(CorrCell {
                source,
                w,
                n,
                mad,
                bias,
                replications: k,
                failures: cfg.replications - k,
            });
        }
    }

    let mut rates = Vec::new();
    if cfg.sample_sizes.len() >= 3 {
        for (source, w) in corr_cell_keys(cfg) {
            let row: Vec<&CorrCell> = cells.iter().filter(|c| c.source == source && c.w == w).collect();
            let ns: Vec<f64> = row.iter().map(|c| c.n as f64).collect();
            let mads: Vec<f64> = row.iter().map(|c| c.mad).collect();
            if let Ok(alpha) = fit_power_law(&ns, &mads) {
                rates.push(RateFit { source, w, alpha });
            }
        }
    }
    Ok(CorrStudyResult {
        cells,
        rates,
        estimates,
        failures,
    })
}

/// Fits `MAD = c·n^(−α)` by least squares on the log scale and returns `α`.
pub fn fit_power_law(ns: &[f64], mads: &[f64]) -> Result<f64> {
    if ns.len() != mads.len() {
        return Err(Error::Dimension {
            op: "fit_power_law",
            left: vec![ns.len()],
            right: vec![mads.len()],
        });
    }
    if ns.len() < 3 {
        return Err(Error::Contract("power-law fit needs at least three points".into()));
    }
    if ns.iter().chain(mads).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Domain {
            op: "fit_power_law",
            detail: "sample sizes and MADs must be positive and finite".into(),
        });
    }
    let x = Tensor::matrix(ns.len(), 1, ns.iter().map(|n| n.ln()).collect())?;
    let y: Vec<f64> = mads.iter().map(|m| m.ln()).collect();
    let fit = ols_fit(&x, &y)?;
    Ok(-fit.coefficients[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaStudyConfig {
    pub k: usize,
    /// Inclusive range of per-study sample sizes, drawn uniformly.
    pub n_range: [usize; 2],
    /// Mean coefficients `(β₀, …, β_p)`.
    pub beta: Vec<f64>,
    /// Covariance of per-study coefficients, `(p+1) × (p+1)`.
    pub sigma_beta: Vec<Vec<f64>>,
    pub sigma2_eps: f64,
    pub ws: Vec<f64>,
    pub replications: usize,
    /// Index of the pooled coefficient (0 is the intercept).
    pub coefficient: usize,
    pub alpha: f64,
    pub architecture: Architecture,
    /// Training with validation-based stopping; the seed is replaced per study.
    pub train: TrainConfig,
    /// Extra low-learning-rate steps after the validation loss stops improving.
    pub fine_tune_steps: usize,
    pub fine_tune_learning_rate: f64,
    pub seed: u64,
}

/// Diagonal `1e-4` except `var(β₁) = 5e-3`, off-diagonal `5e-5`.
pub fn default_sigma_beta() -> Vec<Vec<f64>> {
    (0..5)
        .map(|i| {
            (0..5)
                .map(|j| match (i == j, i) {
                    (true, 1) => 5e-3,
                    (true, _) => 1e-4,
                    _ => 5e-5,
                })
                .collect()
        })
        .collect()
}

impl Default for MetaStudyConfig {
    fn default() -> Self {
        MetaStudyConfig {
            k: 10,
            n_range: [750, 1000],
            beta: vec![0.0, 1.0, 1.0, 1.0, 1.0],
            sigma_beta: default_sigma_beta(),
            sigma2_eps: 0.5,
            ws: vec![0.0, 0.8, 1.0],
            replications: 50,
            coefficient: 2,
            alpha: 0.05,
            architecture: Architecture {
                hidden_sizes: vec![32],
                n_flows: 2,
            },
            train: TrainConfig {
                max_iters: 1000,
                patience: 100,
                validation_fraction: 0.3,
                ..TrainConfig::default()
            },
            fine_tune_steps: 100,
            fine_tune_learning_rate: 1e-4,
            seed: 0,
        }
    }
}

impl MetaStudyConfig {
    /// The published budget: 500 replications.
    pub fn paper_scale() -> Self {
        MetaStudyConfig {
            replications: 500,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let q = self.beta.len();
        if self.k < 2 {
            return Err(Error::Contract("meta study needs K >= 2".into()));
        }
        if q < 2 {
            return Err(Error::Contract("beta needs an intercept and at least one slope".into()));
        }
        if self.n_range[0] > self.n_range[1] || self.n_range[0] < 2 * (q + 1) {
            return Err(Error::Contract(format!(
                "n range {:?} must be ordered and at least {} (2 × data columns)",
                self.n_range,
                2 * (q + 1)
            )));
        }
        if self.sigma_beta.len() != q || self.sigma_beta.iter().any(|r| r.len() != q) {
            return Err(Error::Contract(format!("sigma_beta must be {q} × {q}")));
        }
        if self.coefficient >= q {
            return Err(Error::Contract(format!("coefficient index {} out of range", self.coefficient)));
        }
        if !(self.sigma2_eps > 0.0) {
            return Err(Error::Contract("sigma2_eps must be positive".into()));
        }
        if self.ws.is_empty() || self.ws.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(Error::Contract("w grid must be non-empty within [0, 1]".into()));
        }
        if self.replications == 0 {
            return Err(Error::Contract("replications must be positive".into()));
        }
        cholesky(&self.sigma_beta).map(|_| ())
    }
}

fn cholesky(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = a[i][i] - s;
                if !(v > 0.0) {
                    return Err(Error::Contract("sigma_beta is not positive definite".into()));
                }
                l[i][j] = v.sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Pooled estimate for one dataset family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PooledEstimate {
    /// `None` for the real data.
    pub w: Option<f64>,
    pub estimate: f64,
    pub variance: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub tau2: f64,
}

impl PooledEstimate {
    fn from_result(w: Option<f64>, r: &MetaResult) -> Self {
        PooledEstimate {
            w,
            estimate: r.theta_r,
            variance: r.var_r,
            ci_low: r.ci_low,
            ci_high: r.ci_high,
            tau2: r.tau2_hat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaReplication {
    pub replication: usize,
    pub real: PooledEstimate,
    /// In `ws` order.
    pub synthetic: Vec<PooledEstimate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaSummary {
    pub w: Option<f64>,
    /// Mean `|β̃(w) − β̂|`; zero for the real row.
    pub mad_vs_real: f64,
    /// Mean absolute difference from the true coefficient.
    pub mad_vs_truth: f64,
    /// Fraction of intervals covering the true coefficient.
    pub coverage: f64,
    pub replications: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestEntry {
    /// `real` or `w=<value>`.
    pub dataset: String,
    #[serde(flatten)]
    pub row: ForestRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaStudyResult {
    pub replications: Vec<MetaReplication>,
    pub summary: Vec<MetaSummary>,
    /// Forest table of the first successful replication.
    pub forest: Vec<ForestEntry>,
    pub failures: Vec<UnitFailure>,
}

struct StudyData {
    /// Columns `X₁ … X_p, Y`.
    values: Tensor,
}

fn simulate_study(cfg: &MetaStudyConfig, chol: &[Vec<f64>], seed: u64) -> StudyData {
    let mut r = rng::stream(seed, 0);
    let n = r.random_range(cfg.n_range[0]..=cfg.n_range[1]);
    let q = cfg.beta.len();
    let p = q - 1;
    let e: Vec<f64> = (0..q).map(|_| StandardNormal.sample(&mut r)).collect();
    let beta: Vec<f64> = (0..q)
        .map(|i| cfg.beta[i] + (0..=i).map(|j| chol[i][j] * e[j]).sum::<f64>())
        .collect();
    let g = rng::gaussian_rows(rng::derive_seed(seed, 1), n, p + 1);
    let sd = cfg.sigma2_eps.sqrt();
    let mut data = Vec::with_capacity(n * (p + 1));
    for i in 0..n {
        let row = g.row(i);
        let y = beta[0] + (0..p).map(|j| beta[j + 1] * row[j]).sum::<f64>() + sd * row[p];
        data.extend_from_slice(&row[..p]);
        data.push(y);
    }
    StudyData {
        values: Tensor::matrix(n, p + 1, data).expect("shape is consistent"),
    }
}

/// `(β̂_j, var β̂_j)` from regressing the last column on the others.
fn study_estimate(values: &Tensor, coefficient: usize) -> Result<(f64, f64)> {
    let (n, c) = (values.rows(), values.cols());
    let mut x = Vec::with_capacity(n * (c - 1));
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = values.row(i);
        x.extend_from_slice(&row[..c - 1]);
        y.push(row[c - 1]);
    }
    let fit = ols_fit(&Tensor::matrix(n, c - 1, x)?, &y)?;
    Ok((fit.coefficients[coefficient], fit.variances[coefficient]))
}

fn map_columns(values: &Tensor, transforms: &[ColumnTransform], f: impl Fn(&ColumnTransform, f64) -> f64) -> Tensor {
    let c = values.cols();
    let data = values
        .data()
        .iter()
        .enumerate()
        .map(|(k, &v)| f(&transforms[k % c], v))
        .collect();
    Tensor::matrix(values.rows(), c, data).expect("same shape")
}

/// Trains a flow with validation-based stopping, then fine-tunes on the
/// same training rows at a low learning rate.
fn fit_study_flow(cfg: &MetaStudyConfig, x: &Tensor, seed: u64) -> Result<MafModel> {
    let tc = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let (model, _) = train(x, &cfg.architecture, &tc)?;
    if cfg.fine_tune_steps == 0 {
        return Ok(model);
    }
    let rows = if tc.validation_fraction > 0.0 {
        // same split train() used internally
        let (_, t) = split_indices(x.rows(), tc.validation_fraction, rng::derive_seed(seed, 2))?;
        select_rows(x, &t)
    } else {
        x.clone()
    };
    let fine = TrainConfig {
        learning_rate: cfg.fine_tune_learning_rate,
        max_iters: cfg.fine_tune_steps,
        validation_fraction: 0.0,
        ..tc
    };
    train_from(model, &rows, &fine).map(|(m, _)| m)
}

struct MetaRepOutput {
    rep: MetaReplication,
    forest: Vec<ForestEntry>,
}

fn meta_replication(cfg: &MetaStudyConfig, chol: &[Vec<f64>], rep: usize) -> std::result::Result<MetaRepOutput, (usize, Error)> {
    let seed = rng::derive_seed(cfg.seed, rep as u64);
    let mut real = Vec::with_capacity(cfg.k);
    let mut synth: Vec<Vec<StudySummary>> = vec![Vec::with_capacity(cfg.k); cfg.ws.len()];
    for k in 0..cfg.k {
        let label = format!("study {}", k + 1);
        let study_seed = rng::derive_seed(seed, k as u64);
        let data = simulate_study(cfg, chol, study_seed);
        let (b, v) = study_estimate(&data.values, cfg.coefficient).map_err(|e| (k, e))?;
        real.push(StudySummary::new(label.clone(), b, v));

        let transforms: Vec<ColumnTransform> = (0..data.values.cols())
            .map(|j| {
                let col: Vec<f64> = (0..data.values.rows()).map(|i| data.values.at(i, j)).collect();
                ColumnTransform::fit(TransformKind::Zscore, &format!("column {}", j + 1), &col)
            })
            .collect::<Result<_>>()
            .map_err(|e| (k, e))?;
        let model_units = map_columns(&data.values, &transforms, |t, v| t.apply(v, 0.0));
        let flow = fit_study_flow(cfg, &model_units, rng::derive_seed(study_seed, 2)).map_err(|e| (k, e))?;
        let bank = NoiseBank::new(rng::derive_seed(study_seed, 3), data.values.rows(), data.values.cols());
        for (wi, &w) in cfg.ws.iter().enumerate() {
            let synthetic = if w == 1.0 {
                // the mechanism is the identity here; skip the transform round trip too
                data.values.clone()
            } else {
                let s = latent_noise_inject_with(&flow, &model_units, w, &bank).map_err(|e| (k, e))?;
                map_columns(&s, &transforms, |t, v| t.invert(v))
            };
            let (b, v) = study_estimate(&synthetic, cfg.coefficient).map_err(|e| (k, e))?;
            synth[wi].push(StudySummary::new(label.clone(), b, v));
        }
    }

    let pooled = |studies: &[StudySummary]| random_effects(studies, cfg.alpha).map_err(|e| (cfg.k, e));
    let real_result = pooled(&real)?;
    let mut forest: Vec<ForestEntry> = forest_export(&real, &real_result)
        .map_err(|e| (cfg.k, e))?
        .into_iter()
        .map(|row| ForestEntry {
            dataset: "real".into(),
            row,
        })
        .collect();
    let mut synthetic = Vec::with_capacity(cfg.ws.len());
    for (studies, &w) in synth.iter().zip(&cfg.ws) {
        let r = pooled(studies)?;
        forest.extend(forest_export(studies, &r).map_err(|e| (cfg.k, e))?.into_iter().map(|row| ForestEntry {
            dataset: format!("w={w}"),
            row,
        }));
        synthetic.push(PooledEstimate::from_result(Some(w), &r));
    }
    Ok(MetaRepOutput {
        rep: MetaReplication {
            replication: rep,
            real: PooledEstimate::from_result(None, &real_result),
            synthetic,
        },
        forest,
    })
}

pub fn run_meta_study(cfg: &MetaStudyConfig) -> Result<MetaStudyResult> {
    cfg.validate()?;
    let chol = cholesky(&cfg.sigma_beta)?;
    let outputs: Vec<std::result::Result<MetaRepOutput, (usize, Error)>> = (0..cfg.replications)
        .into_par_iter()
        .map(|r| meta_replication(cfg, &chol, r))
        .collect();

    let mut replications = Vec::new();
    let mut failures = Vec::new();
    let mut forest = None;
    for (r, out) in outputs.into_iter().enumerate() {
        match out {
            Ok(o) => {
                forest.get_or_insert(o.forest);
                replications.push(o.rep);
            }
            Err((unit, e)) if e.is_numeric() => failures.push(UnitFailure {
                replication: r,
                unit,
                error: e.to_string(),
            }),
            Err((_, e)) => return Err(e),
        }
    }
    check_failure_rate(failures.len(), cfg.replications, "replications")?;

    let truth = cfg.beta[cfg.coefficient];
    let count = replications.len() as f64;
    let summarize = |w: Option<f64>, pick: &dyn Fn(&MetaReplication) -> PooledEstimate| {
        let (mut vs_real, mut vs_truth, mut covered) = (0.0, 0.0, 0usize);
        for rep in &replications {
            let e = pick(rep);
            vs_real += (e.estimate - rep.real.estimate).abs();
            vs_truth += (e.estimate - truth).abs();
            covered += usize::from(e.ci_low <= truth && truth <= e.ci_high);
        }
        MetaSummary {
            w,
            mad_vs_real: vs_real / count,
            mad_vs_truth: vs_truth / count,
            coverage: covered as f64 / count,
            replications: replications.len(),
        }
    };
    let mut summary = vec![summarize(None, &|r| r.real)];
    for (wi, &w) in cfg.ws.iter().enumerate() {
        summary.push(summarize(Some(w), &|r| r.synthetic[wi]));
    }
    Ok(MetaStudyResult {
        replications,
        summary,
        forest: forest.unwrap_or_default(),
        failures,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn lines(header: &str, rows: impl Iterator<Item = String>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r);
        out.push('\n');
    }
    out
}

/// Run manifest: everything needed to reproduce the tables. Kept free of
/// timing so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest<C> {
    pub study: String,
    pub version: String,
    pub seed: u64,
    pub config: C,
    pub failures: Vec<UnitFailure>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Input(e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Writes `cells.csv`, `rates.csv`, `estimates.csv` and `manifest.json`.
pub fn write_correlation_outputs(dir: &Path, cfg: &CorrStudyConfig, res: &CorrStudyResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cells = lines(
        "source,w,n,mad,bias,replications,failures",
        res.cells.iter().map(|c| {
            format!(
                "{},{},{},{},{},{},{}",
                c.source.name(),
                cell(c.w),
                c.n,
                c.mad,
                c.bias,
                c.replications,
                c.failures
            )
        }),
    );
    write_atomic(&dir.join("cells.csv"), cells.as_bytes())?;
    let rates = lines(
        "source,w,alpha",
        res.rates.iter().map(|r| format!("{},{},{}", r.source.name(), cell(r.w), r.alpha)),
    );
    write_atomic(&dir.join("rates.csv"), rates.as_bytes())?;
    let est = lines(
        "replication,source,w,n,rho_hat",
        res.estimates
            .iter()
            .map(|e| format!("{},{},{},{},{}", e.replication, e.source.name(), cell(e.w), e.n, e.rho_hat)),
    );
    write_atomic(&dir.join("estimates.csv"), est.as_bytes())?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            study: "correlation".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            failures: res.failures.clone(),
        },
    )
}

/// Writes `paired.csv` (one column per w), `summary.csv`, `forest.csv` and
/// `manifest.json`.
pub fn write_meta_outputs(dir: &Path, cfg: &MetaStudyConfig, res: &MetaStudyResult) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut header = String::from("replication,real");
    for w in &cfg.ws {
        header.push_str(&format!(",w={w}"));
    }
    let paired = lines(
        &header,
        res.replications.iter().map(|r| {
            let mut s = format!("{},{}", r.replication, r.real.estimate);
            for e in &r.synthetic {
                s.push_str(&format!(",{}", e.estimate));
            }
            s
        }),
    );
    write_atomic(&dir.join("paired.csv"), paired.as_bytes())?;
    let summary = lines(
        "dataset,mad_vs_real,mad_vs_truth,coverage,replications",
        res.summary.iter().map(|s| {
            let name = s.w.map(|w| format!("w={w}")).unwrap_or_else(|| "real".into());
            format!("{},{},{},{},{}", name, s.mad_vs_real, s.mad_vs_truth, s.coverage, s.replications)
        }),
    );
    write_atomic(&dir.join("summary.csv"), summary.as_bytes())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["dataset", "label", "theta_hat", "ci_low", "ci_high"])
        .map_err(|e| Error::Input(e.to_string()))?;
    for f in &res.forest {
        w.write_record([
            f.dataset.clone(),
            f.row.label.clone(),
            f.row.theta_hat.to_string(),
            f.row.ci_low.to_string(),
            f.row.ci_high.to_string(),
        ])
        .map_err(|e| Error::Input(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    write_atomic(&dir.join("forest.csv"), &bytes)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            study: "meta".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed: cfg.seed,
            config: cfg.clone(),
            failures: res.failures.clone(),
        },
    )
}
