//! Downstream estimators: Pearson and compound-symmetry correlation, and
//! least squares with coefficient variances.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Relative tolerance on QR pivots, measured against the largest pivot.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Dimension {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(Error::Contract("pearson needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if !(sxx > 0.0 && syy > 0.0) {
        return Err(Error::Degenerate("pearson: a variable has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Compound-symmetry correlation estimate: the mean of all pairwise
/// Pearson correlations between columns.
pub fn cs_corr_mle(x: &Tensor) -> Result<f64> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::Contract("compound-symmetry correlation needs d >= 2".into()));
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..x.rows()).map(|i| x.at(i, j)).collect()).collect();
    let mut acc = 0.0;
    for a in 0..d {
        for b in (a + 1)..d {
            acc += pearson(&cols[a], &cols[b]).map_err(|e| match e {
                Error::Degenerate(_) => Error::Degenerate(format!("column {} or {} is constant", a + 1, b + 1)),
                other => other,
            })?;
        }
    }
    Ok(2.0 * acc / (d * (d - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlsFit {
    /// Intercept first, then one per covariate.
    pub coefficients: Vec<f64>,
    /// Diagonal of `σ̂²(X̃ᵀX̃)⁻¹`.
    pub variances: Vec<f64>,
    /// `RSS / (n − p − 1)`
    pub sigma2: f64,
    pub n: usize,
    pub p: usize,
}

/// Least squares of `y` on `[1 | x]` by column-pivoted Householder QR.
///
/// A pivot smaller than [`RANK_TOLERANCE`] times the first (largest) one is
/// reported as [`Error::SingularDesign`] with the design column index
/// (0 is the intercept).
pub fn ols_fit(x: &Tensor, y: &[f64]) -> Result<OlsFit> {
    let (n, p) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::Dimension {
            op: "ols_fit",
            left: x.shape().to_vec(),
            right: vec![y.len()],
        });
    }
    if n <= p + 1 {
        return Err(Error::Contract(format!("ols_fit needs n > p + 1, got n = {n}, p = {p}")));
    }
    if !x.all_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("regression input".into()));
    }
    let k = p + 1;
    // column-major design so Householder updates touch contiguous memory
    let mut a: Vec<Vec<f64>> = Vec::with_capacity(k);
    a.push(vec![1.0; n]);
    for j in 0..p {
        a.push((0..n).map(|i| x.at(i, j)).collect());
    }
    let mut qty = y.to_vec();
    let mut perm: Vec<usize> = (0..k).collect();
    let mut r = vec![vec![0.0; k]; k];
    let mut largest = 0.0;

    for c in 0..k {
        let norm2 = |v: &[f64]| v[c..].iter().map(|t| t * t).sum::<f64>();
        let best = (c..k).max_by(|&i, &j| norm2(&a[i]).total_cmp(&norm2(&a[j]))).expect("non-empty range");
        a.swap(c, best);
        perm.swap(c, best);
        for row in r.iter_mut() {
            row.swap(c, best);
        }
        let col = &a[c];
        let alpha_norm = norm2(col).sqrt();
        if c == 0 {
            largest = alpha_norm;
        }
        if !(alpha_norm > RANK_TOLERANCE * largest) {
            return Err(Error::SingularDesign { pivot: perm[c] });
        }
        let alpha = if col[c] > 0.0 { -alpha_norm } else { alpha_norm };
        let mut v: Vec<f64> = col[c..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|t| t * t).sum();
        let reflect = |target: &mut [f64]| {
            let dot: f64 = v.iter().zip(&target[c..]).map(|(a, b)| a * b).sum();
            let f = 2.0 * dot / vnorm2;
            target[c..].iter_mut().zip(&v).for_each(|(t, vi)| *t -= f * vi);
        };
        r[c][c] = alpha;
        for j in (c + 1)..k {
            reflect(&mut a[j]);
            r[c][j] = a[j][c];
        }
        reflect(&mut qty);
    }

    // R β' = (Qᵀy)[..k], then R⁻¹ column by column for the variances
    let mut beta_perm = vec![0.0; k];
    for i in (0..k).rev() {
        let s: f64 = ((i + 1)..k).map(|j| r[i][j] * beta_perm[j]).sum();
        beta_perm[i] = (qty[i] - s) / r[i][i];
    }
    let mut rinv = vec![vec![0.0; k]; k];
    for col in 0..k {
        for i in (0..=col).rev() {
            let e = if i == col { 1.0 } else { 0.0 };
            let s: f64 = ((i + 1)..=col).map(|j| r[i][j] * rinv[j][col]).sum();
            rinv[i][col] = (e - s) / r[i][i];
        }
    }

    let mut coefficients = vec![0.0; k];
    for (slot, &orig) in perm.iter().enumerate() {
        coefficients[orig] = beta_perm[slot];
    }
    let rss: f64 = (0..n)
        .map(|i| {
            let fit = coefficients[0] + (0..p).map(|j| coefficients[j + 1] * x.at(i, j)).sum::<f64>();
            (y[i] - fit).powi(2)
        })
        .sum();
    let sigma2 = rss / (n - k) as f64;
    let mut variances = vec![0.0; k];
    for (slot, &orig) in perm.iter().enumerate() {
        variances[orig] = sigma2 * rinv[slot].iter().map(|v| v * v).sum::<f64>();
    }
    Ok(OlsFit {
        coefficients,
        variances,
        sigma2,
        n,
        p,
    })
}
