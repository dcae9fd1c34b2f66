//! Fixed-effects and DerSimonian–Laird random-effects meta-analysis.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudySummary {
    pub label: String,
    pub theta_hat: f64,
    pub var_hat: f64,
}

impl StudySummary {
    pub fn new(label: impl Into<String>, theta_hat: f64, var_hat: f64) -> Self {
        StudySummary {
            label: label.into(),
            theta_hat,
            var_hat,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetaResult {
    pub theta_f: f64,
    pub var_f: f64,
    pub tau2_hat: f64,
    pub theta_r: f64,
    pub var_r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub alpha: f64,
    pub k: usize,
}

fn check(studies: &[StudySummary], min_k: usize) -> Result<()> {
    if studies.len() < min_k {
        return Err(Error::Contract(format!(
            "need at least {min_k} studies, got {}",
            studies.len()
        )));
    }
    for s in studies {
        if !s.theta_hat.is_finite() {
            return Err(Error::NonFinite(format!("estimate of study {:?}", s.label)));
        }
        if !(s.var_hat > 0.0 && s.var_hat.is_finite()) {
            return Err(Error::Domain {
                op: "meta-analysis",
                detail: format!("study {:?} has variance {}, expected > 0", s.label, s.var_hat),
            });
        }
    }
    Ok(())
}

/// Inverse-variance pooling with between-study variance `tau2` added to
/// every study variance; `tau2 = 0` is the fixed-effects estimator.
pub fn pooled_with_tau2(studies: &[StudySummary], tau2: f64) -> Result<(f64, f64)> {
    check(studies, 1)?;
    if !(tau2 >= 0.0 && tau2.is_finite()) {
        return Err(Error::Contract(format!("tau2 must be finite and non-negative, got {tau2}")));
    }
    let (mut sw, mut swt) = (0.0, 0.0);
    for s in studies {
        let w = 1.0 / (s.var_hat + tau2);
        sw += w;
        swt += w * s.theta_hat;
    }
    Ok((swt / sw, 1.0 / sw))
}

/// `(θ̂_F, σ²_F)`
pub fn fixed_effects(studies: &[StudySummary]) -> Result<(f64, f64)> {
    pooled_with_tau2(studies, 0.0)
}

/// DerSimonian–Laird moment estimate of the between-study variance.
pub fn dl_tau2(studies: &[StudySummary]) -> Result<f64> {
    check(studies, 2)?;
    let (theta_f, _) = fixed_effects(studies)?;
    let (mut q, mut sw, mut sw2) = (0.0, 0.0, 0.0);
    for s in studies {
        let w = 1.0 / s.var_hat;
        q += w * (s.theta_hat - theta_f).powi(2);
        sw += w;
        sw2 += w * w;
    }
    let denom = sw - sw2 / sw;
    if !(denom > 0.0) || !denom.is_finite() {
        return Err(Error::Degenerate(format!(
            "DerSimonian-Laird denominator is {denom}; study weights are too unbalanced to estimate tau^2"
        )));
    }
    let k = studies.len() as f64;
    Ok(((q - (k - 1.0)) / denom).max(0.0))
}

/// Random-effects pooled estimate with a two-sided `1 − alpha` Wald interval.
pub fn random_effects(studies: &[StudySummary], alpha: f64) -> Result<MetaResult> {
    let z = z_two_sided(alpha)?;
    let tau2 = dl_tau2(studies)?;
    let (theta_f, var_f) = fixed_effects(studies)?;
    let (theta_r, var_r) = pooled_with_tau2(studies, tau2)?;
    let half = z * var_r.sqrt();
    Ok(MetaResult {
        theta_f,
        var_f,
        tau2_hat: tau2,
        theta_r,
        var_r,
        ci_low: theta_r - half,
        ci_high: theta_r + half,
        alpha,
        k: studies.len(),
    })
}

fn z_two_sided(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    inverse_normal(1.0 - alpha / 2.0)
}

/// Standard normal quantile (Acklam's rational approximation, relative error
/// below 1.2e-9).
pub fn inverse_normal(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain {
            op: "inverse_normal",
            detail: format!("probability {p} outside (0, 1)"),
        });
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    Ok(if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    })
}

/// Label of the pooled row in forest tables.
pub const POOLED_LABEL: &str = "random-effects";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestRow {
    pub label: String,
    pub theta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// One row per study with its own Wald interval at `result.alpha`, in input
/// order, followed by the pooled random-effects row.
pub fn forest_export(studies: &[StudySummary], result: &MetaResult) -> Result<Vec<ForestRow>> {
    check(studies, 1)?;
    let z = z_two_sided(result.alpha)?;
    let mut rows: Vec<ForestRow> = studies
        .iter()
        .map(|s| {
            let half = z * s.var_hat.sqrt();
            ForestRow {
                label: s.label.clone(),
                theta_hat: s.theta_hat,
                ci_low: s.theta_hat - half,
                ci_high: s.theta_hat + half,
            }
        })
        .collect();
    rows.push(ForestRow {
        label: POOLED_LABEL.into(),
        theta_hat: result.theta_r,
        ci_low: result.ci_low,
        ci_high: result.ci_high,
    });
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    match e.position() {
        Some(pos) => Error::Parse {
            row: pos.record() as usize,
            col: 0,
            detail: e.to_string(),
        },
        None => Error::Input(e.to_string()),
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(text: &str, header: &[&str]) -> Result<Vec<T>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let found: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Input(format!("expected header {}, found {}", header.join(","), found.join(","))));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub const STUDY_HEADER: [&str; 3] = ["label", "theta_hat", "var_hat"];
pub const FOREST_HEADER: [&str; 4] = ["label", "theta_hat", "ci_low", "ci_high"];

/// `label,theta_hat,var_hat` with a header row.
pub fn parse_studies_csv(text: &str) -> Result<Vec<StudySummary>> {
    let studies: Vec<StudySummary> = from_csv(text, &STUDY_HEADER)?;
    check(&studies, 1)?;
    Ok(studies)
}

pub fn read_studies_csv(path: &Path) -> Result<Vec<StudySummary>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_studies_csv(&text)
}

pub fn studies_to_csv(studies: &[StudySummary]) -> Result<String> {
    to_csv(studies)
}

pub fn forest_to_csv(rows: &[ForestRow]) -> Result<String> {
    to_csv(rows)
}

pub fn parse_forest_csv(text: &str) -> Result<Vec<ForestRow>> {
    from_csv(text, &FOREST_HEADER)
}

pub fn write_forest_csv(path: &Path, rows: &[ForestRow]) -> Result<()> {
    write_atomic(path, forest_to_csv(rows)?.as_bytes())
}
