//! Synthetic data mechanisms.
//!
//! * latent noise injection: `x̃ = f(√w·f⁻¹(x) + √(1−w)·z)`, one output row per input row
//! * flow sampling: `x̃ = f(z)`
//! * direct noise injection: `x̃ = √w·x + √(1−w)·diag(σ̂)·z`
//!
//! All mechanisms work in model units. Latent noise is drawn from a
//! [`NoiseBank`] whose row `i` depends only on `(seed, i)`, so the same bank
//! can be reused across a grid of `w` values and row `i` of the output
//! always corresponds to row `i` of the input.

use serde::{Deserialize, Serialize};

use crate::dataio::mean_sd;
use crate::error::{Error, Result};
use crate::maf::MafModel;
use crate::numerics::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    LatentNoise,
    FlowSample,
    DirectNoise,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::LatentNoise => "latent-noise",
            Mechanism::FlowSample => "flow-sample",
            Mechanism::DirectNoise => "direct-noise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "latent-noise" => Ok(Mechanism::LatentNoise),
            "flow-sample" => Ok(Mechanism::FlowSample),
            "direct-noise" => Ok(Mechanism::DirectNoise),
            other => Err(Error::Input(format!(
                "unknown mechanism {other:?} (expected latent-noise, flow-sample or direct-noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisSpec {
    pub mechanism: Mechanism,
    pub w: f64,
    pub seed: u64,
    /// Output size for flow sampling; the other mechanisms return one row per input row.
    pub m: Option<usize>,
}

/// Standard normal rows shared across mechanisms and `w` values.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseBank {
    z: Tensor,
}

impl NoiseBank {
    pub fn new(seed: u64, rows: usize, cols: usize) -> Self {
        NoiseBank {
            z: rng::gaussian_rows(seed, rows, cols),
        }
    }

    pub fn from_tensor(z: Tensor) -> Self {
        NoiseBank { z }
    }

    pub fn z(&self) -> &Tensor {
        &self.z
    }

    /// Bank whose row `k` is this bank's row `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> NoiseBank {
        NoiseBank {
            z: crate::maf::select_rows(&self.z, perm),
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if self.z.shape() != x.shape() {
            return Err(Error::Dimension {
                op: "noise bank",
                left: self.z.shape().to_vec(),
                right: x.shape().to_vec(),
            });
        }
        Ok(())
    }
}

fn check_w(w: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::Contract(format!("w must lie in [0, 1], got {w}")));
    }
    Ok(())
}

/// Latent noise injection with a fresh noise bank drawn from `seed`.
pub fn latent_noise_inject(model: &MafModel, x: &Tensor, w: f64, seed: u64) -> Result<Tensor> {
    let bank = NoiseBank::new(seed, x.rows(), x.cols());
    latent_noise_inject_with(model, x, w, &bank)
}

/// Latent noise injection with caller-supplied noise; `w = 1` returns `x` unchanged.
pub fn latent_noise_inject_with(model: &MafModel, x: &Tensor, w: f64, noise: &NoiseBank) -> Result<Tensor> {
    check_w(w)?;
    if x.cols() != model.d() {
        return Err(Error::Dimension {
            op: "latent_noise_inject",
            left: x.shape().to_vec(),
            right: vec![model.d()],
        });
    }
    noise.check(x)?;
    if w == 1.0 {
        // f(f⁻¹(x)) = x; skip the round trip so the identity holds exactly
        return Ok(x.clone());
    }
    let (latent, _) = model.inverse_batch(x)?;
    let (a, b) = (w.sqrt(), (1.0 - w).sqrt());
    let mixed: Vec<f64> = latent
        .data()
        .iter()
        .zip(noise.z.data())
        .map(|(u, z)| a * u + b * z)
        .collect();
    model.forward_batch(&Tensor::matrix(x.rows(), x.cols(), mixed)?)
}

pub fn flow_sample(model: &MafModel, m: usize, seed: u64) -> Result<Tensor> {
    model.sample(m, seed)
}

pub fn direct_noise_inject(x: &Tensor, w: f64, seed: u64) -> Result<Tensor> {
    let bank = NoiseBank::new(seed, x.rows(), x.cols());
    direct_noise_inject_with(x, w, &bank)
}

pub fn direct_noise_inject_with(x: &Tensor, w: f64, noise: &NoiseBank) -> Result<Tensor> {
    check_w(w)?;
    noise.check(x)?;
    let (n, d) = (x.rows(), x.cols());
    if n < 2 {
        return Err(Error::Contract("direct noise needs at least two rows".into()));
    }
    let sds = (0..d)
        .map(|j| {
            let (_, sd) = mean_sd(&(0..n).map(|i| x.at(i, j)).collect::<Vec<_>>());
            if sd > 0.0 {
                Ok(sd)
            } else {
                Err(Error::Degenerate(format!("column {} has zero variance", j + 1)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let (a, b) = (w.sqrt(), (1.0 - w).sqrt());
    let data = x
        .data()
        .iter()
        .zip(noise.z.data())
        .enumerate()
        .map(|(k, (v, z))| a * v + b * sds[k % d] * z)
        .collect();
    Tensor::matrix(n, d, data)
}

/// Single entry point over all three mechanisms.
pub fn synthesize(model: Option<&MafModel>, x: &Tensor, spec: &SynthesisSpec) -> Result<Tensor> {
    let need_model = || model.ok_or_else(|| Error::Contract(format!("{} needs a trained flow", spec.mechanism.name())));
    match spec.mechanism {
        Mechanism::LatentNoise => latent_noise_inject(need_model()?, x, spec.w, spec.seed),
        Mechanism::FlowSample => {
            let m = spec
                .m
                .ok_or_else(|| Error::Contract("flow sampling needs an output size m".into()))?;
            flow_sample(need_model()?, m, spec.seed)
        }
        Mechanism::DirectNoise => direct_noise_inject(x, spec.w, spec.seed),
    }
}
