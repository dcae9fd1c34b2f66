//! Privacy auditing and calibration.
//!
//! Distances are Euclidean in model units. The membership attack scores a
//! point by its distance to the nearest synthetic row; members of the flow's
//! training set tend to score lower, so an AUC near 0.5 means the attack
//! cannot tell them apart.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::split_indices;
use crate::error::{Error, Result};
use crate::maf::{select_rows, MafModel};
use crate::numerics::Tensor;
use crate::rng;
use crate::synth::{latent_noise_inject_with, NoiseBank};

pub const DEFAULT_AUC_THRESHOLD: f64 = 0.55;
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.8;

/// `0.05, 0.10, …, 0.95`
pub fn default_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub w: f64,
    pub auc: Option<f64>,
    pub closer_prob: Option<f64>,
    pub median_rank: Option<usize>,
    pub n: usize,
}

impl PrivacyReport {
    pub const CSV_HEADER: &'static str = "w,auc,closer_prob,median_rank,n";

    pub fn csv_row(&self) -> String {
        fn cell<T: std::fmt::Display>(v: Option<T>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        format!(
            "{},{},{},{},{}",
            self.w,
            cell(self.auc),
            cell(self.closer_prob),
            cell(self.median_rank),
            self.n
        )
    }
}

pub fn reports_to_csv(reports: &[PrivacyReport]) -> String {
    let mut out = String::from(PrivacyReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Distance from `x0` to its nearest row of `synth`.
pub fn membership_score(x0: &[f64], synth: &Tensor) -> Result<f64> {
    if synth.rows() == 0 {
        return Err(Error::Contract("synthetic set is empty".into()));
    }
    if synth.cols() != x0.len() {
        return Err(Error::Dimension {
            op: "membership_score",
            left: vec![x0.len()],
            right: synth.shape().to_vec(),
        });
    }
    let best = (0..synth.rows())
        .map(|i| sq_dist(x0, synth.row(i)))
        .fold(f64::INFINITY, f64::min);
    Ok(best.sqrt())
}

/// [`membership_score`] for every row of `points`.
pub fn membership_scores(points: &Tensor, synth: &Tensor) -> Result<Vec<f64>> {
    (0..points.rows())
        .into_par_iter()
        .map(|i| membership_score(points.row(i), synth))
        .collect()
}

/// `P(member score < non-member score)`, ties counted one half, over all pairs.
pub fn mia_auc(members: &[f64], nonmembers: &[f64]) -> Result<f64> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Contract("mia_auc needs both score sets non-empty".into()));
    }
    if members.iter().chain(nonmembers).any(|v| v.is_nan()) {
        return Err(Error::NonFinite("membership scores".into()));
    }
    let mut sorted = nonmembers.to_vec();
    sorted.sort_by(f64::total_cmp);
    // twice the half-weighted pair count, kept integral so the sum is exact
    let mut doubled: u128 = 0;
    for &s in members {
        let below_or_eq = sorted.partition_point(|&t| t <= s);
        let below = sorted.partition_point(|&t| t < s);
        let greater = sorted.len() - below_or_eq;
        let ties = below_or_eq - below;
        doubled += 2 * greater as u128 + ties as u128;
    }
    let pairs = 2 * members.len() as u128 * nonmembers.len() as u128;
    Ok(doubled as f64 / pairs as f64)
}

fn check_matched(x: &Tensor, synth: &Tensor) -> Result<()> {
    if x.shape() != synth.shape() {
        return Err(Error::Input(format!(
            "matched metrics need row-aligned data of equal shape, got {:?} and {:?}; \
             for unmatched synthetic data (flow sampling) audit the AUC only",
            x.shape(),
            synth.shape()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::Contract("matched metrics need at least two rows".into()));
    }
    Ok(())
}

/// `r_i = #{j ≠ i : ‖x_i − x̃_i‖ > ‖x_i − x_j‖}`
pub fn perturbation_ranks(x: &Tensor, synth: &Tensor) -> Result<Vec<usize>> {
    check_matched(x, synth)?;
    let n = x.rows();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let own = sq_dist(x.row(i), synth.row(i));
            (0..n).filter(|&j| j != i && own > sq_dist(x.row(i), x.row(j))).count()
        })
        .collect())
}

/// Lower median.
pub fn median_rank(ranks: &[usize]) -> Result<usize> {
    if ranks.is_empty() {
        return Err(Error::Contract("median of no ranks".into()));
    }
    let mut s = ranks.to_vec();
    s.sort_unstable();
    Ok(s[(s.len() - 1) / 2])
}

/// Fraction of ordered pairs `(i, j)`, `i ≠ j`, where real row `j` is
/// strictly closer to `x_i` than its own perturbed version `x̃_i`.
pub fn closer_real_probability(x: &Tensor, synth: &Tensor) -> Result<f64> {
    let ranks = perturbation_ranks(x, synth)?;
    let n = x.rows() as f64;
    Ok(ranks.iter().sum::<usize>() as f64 / (n * (n - 1.0)))
}

/// Report for a matched pair of datasets, optionally with attack AUC.
pub fn matched_report(w: f64, x: &Tensor, synth: &Tensor, auc: Option<f64>) -> Result<PrivacyReport> {
    let ranks = perturbation_ranks(x, synth)?;
    let n = x.rows();
    Ok(PrivacyReport {
        w,
        auc,
        closer_prob: Some(ranks.iter().sum::<usize>() as f64 / (n as f64 * (n as f64 - 1.0))),
        median_rank: Some(median_rank(&ranks)?),
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub selected_w: f64,
    pub threshold_met: bool,
    pub threshold: f64,
    pub reports: Vec<PrivacyReport>,
}

/// Picks the largest `w` on `grid` whose attack AUC stays below `threshold`.
///
/// `data` (model units) is split; a flow is trained on the first part via
/// `train_fn`, that part is perturbed at each `w` with one shared noise bank,
/// and every row of both parts is scored against the perturbed set with the
/// first part as members. With no qualifying `w` the smallest grid value is
/// returned and `threshold_met` is false.
pub fn calibrate_w<F>(
    data: &Tensor,
    train_fn: F,
    grid: &[f64],
    threshold: f64,
    split_fraction: f64,
    seed: u64,
) -> Result<Calibration>
where
    F: FnOnce(&Tensor) -> Result<MafModel>,
{
    if grid.is_empty() {
        return Err(Error::Contract("calibration grid is empty".into()));
    }
    if grid.windows(2).any(|p| p[0] >= p[1]) || grid.iter().any(|w| !(0.0..=1.0).contains(w)) {
        return Err(Error::Contract("calibration grid must be strictly ascending within [0, 1]".into()));
    }
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction {split_fraction} outside (0, 1)")));
    }
    let (members_idx, holdout_idx) = split_indices(data.rows(), split_fraction, rng::derive_seed(seed, 0))?;
    let members = select_rows(data, &members_idx);
    let holdout = select_rows(data, &holdout_idx);
    let model = train_fn(&members)?;
    let bank = NoiseBank::new(rng::derive_seed(seed, 1), members.rows(), members.cols());

    let mut reports = Vec::with_capacity(grid.len());
    for &w in grid {
        let synth = latent_noise_inject_with(&model, &members, w, &bank)?;
        let member_scores = membership_scores(&members, &synth)?;
        let holdout_scores = membership_scores(&holdout, &synth)?;
        let auc = mia_auc(&member_scores, &holdout_scores)?;
        reports.push(matched_report(w, &members, &synth, Some(auc))?);
    }
    let chosen = reports
        .iter()
        .filter(|r| r.auc.is_some_and(|a| a < threshold))
        .map(|r| r.w)
        .next_back();
    Ok(Calibration {
        selected_w: chosen.unwrap_or(grid[0]),
        threshold_met: chosen.is_some(),
        threshold,
        reports,
    })
}

/// Local DP level of latent noise injection at weight `w` for a latent map
/// with sensitivity bound `c`:
/// `ε* = w·C²/(2(1−w)) + C·√(2w·ln(1/δ))/√(1−w)`.
///
/// The guarantee behind this formula is asymptotic in `n`.
pub fn dp_epsilon(c: f64, w: f64, delta: f64) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::Domain {
            op: "dp_epsilon",
            detail: format!("w must lie in (0, 1), got {w}"),
        });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain {
            op: "dp_epsilon",
            detail: format!("delta must lie in (0, 1), got {delta}"),
        });
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Domain {
            op: "dp_epsilon",
            detail: format!("sensitivity bound must be positive, got {c}"),
        });
    }
    Ok(w * c * c / (2.0 * (1.0 - w)) + c * (2.0 * w * (1.0 / delta).ln()).sqrt() / (1.0 - w).sqrt())
}

/// Largest `w` compatible with `(ε, δ)` local DP for sensitivity `Δ`:
/// `1 / (1 + (Δ²/ε²)(ε − 2·ln(2δ)))`, valid for `0 < δ < 1/2`.
pub fn dp_w_bound(sensitivity: f64, eps: f64, delta: f64) -> Result<f64> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain {
            op: "dp_w_bound",
            detail: format!("eps must lie in (0, 1), got {eps}"),
        });
    }
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Domain {
            op: "dp_w_bound",
            detail: format!("delta must lie in (0, 1/2), got {delta}"),
        });
    }
    if !(sensitivity > 0.0 && sensitivity.is_finite()) {
        return Err(Error::Domain {
            op: "dp_w_bound",
            detail: format!("sensitivity must be positive, got {sensitivity}"),
        });
    }
    let ratio = sensitivity * sensitivity / (eps * eps);
    Ok(1.0 / (1.0 + ratio * (eps - 2.0 * (2.0 * delta).ln())))
}

/// Empirical, not a certified bound: the largest observed ratio
/// `‖f⁻¹(x) − f⁻¹(x′)‖ / ‖x − x′‖` over distinct pairs of rows. O(n²).
pub fn empirical_sensitivity(model: &MafModel, x: &Tensor) -> Result<f64> {
    let (z, _) = model.inverse_batch(x)?;
    let n = x.rows();
    let best = (0..n)
        .into_par_iter()
        .map(|i| {
            ((i + 1)..n)
                .filter_map(|j| {
                    let dx = sq_dist(x.row(i), x.row(j));
                    (dx > 0.0).then(|| (sq_dist(z.row(i), z.row(j)) / dx).sqrt())
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}
