//! Tabular datasets, per-column transforms and CSV persistence.
//!
//! Columns are moved into "model units" before a flow sees them:
//!
//! * `zscore`: `(x - mean) / sd`
//! * `minmax-logit`: `logit((x - lo + ε) / (hi - lo + 2ε))` with `ε = padding·(hi - lo)`,
//!   which keeps the observed extremes finite
//! * `dequantize-binary`: `b + U(0, 1)`, inverted by thresholding at 1
//! * `identity`
//!
//! Transform parameters are fit on the dataset they are first applied to and
//! travel with the trained model, so later data is encoded identically.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::rng;

pub const DEFAULT_LOGIT_PADDING: f64 = 0.01;
pub const BINARY_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    Zscore,
    MinmaxLogit,
    DequantizeBinary,
    Identity,
}

impl TransformKind {
    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Zscore => "zscore",
            TransformKind::MinmaxLogit => "minmax-logit",
            TransformKind::DequantizeBinary => "dequantize-binary",
            TransformKind::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(TransformKind::Zscore),
            "minmax-logit" => Ok(TransformKind::MinmaxLogit),
            "dequantize-binary" => Ok(TransformKind::DequantizeBinary),
            "identity" => Ok(TransformKind::Identity),
            other => Err(Error::Input(format!("unknown transform kind {other:?}"))),
        }
    }
}

/// A fitted per-column transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ColumnTransform {
    Zscore { mean: f64, sd: f64 },
    MinmaxLogit { lo: f64, hi: f64, padding: f64 },
    DequantizeBinary { threshold: f64 },
    Identity,
}

impl ColumnTransform {
    pub fn kind(&self) -> TransformKind {
        match self {
            ColumnTransform::Zscore { .. } => TransformKind::Zscore,
            ColumnTransform::MinmaxLogit { .. } => TransformKind::MinmaxLogit,
            ColumnTransform::DequantizeBinary { .. } => TransformKind::DequantizeBinary,
            ColumnTransform::Identity => TransformKind::Identity,
        }
    }

    /// Fits parameters for `kind` on one column of values.
    pub fn fit(kind: TransformKind, name: &str, values: &[f64]) -> Result<Self> {
        match kind {
            TransformKind::Zscore => {
                let (mean, sd) = mean_sd(values);
                if !(sd > 0.0) {
                    return Err(Error::Degenerate(format!(
                        "column {name:?} is constant; zscore needs positive variance"
                    )));
                }
                Ok(ColumnTransform::Zscore { mean, sd })
            }
            TransformKind::MinmaxLogit => {
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if !(lo < hi) {
                    return Err(Error::Degenerate(format!(
                        "column {name:?} has lo = hi; minmax-logit needs a range"
                    )));
                }
                Ok(ColumnTransform::MinmaxLogit {
                    lo,
                    hi,
                    padding: DEFAULT_LOGIT_PADDING,
                })
            }
            TransformKind::DequantizeBinary => {
                if let Some(bad) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Input(format!(
                        "column {name:?} is declared binary but contains {bad}"
                    )));
                }
                Ok(ColumnTransform::DequantizeBinary {
                    threshold: BINARY_THRESHOLD,
                })
            }
            TransformKind::Identity => Ok(ColumnTransform::Identity),
        }
    }

    /// Maps a value to model units. `jitter` is the U(0,1) draw used only by
    /// binary dequantization.
    pub fn apply(&self, x: f64, jitter: f64) -> f64 {
        match *self {
            ColumnTransform::Zscore { mean, sd } => (x - mean) / sd,
            ColumnTransform::MinmaxLogit { lo, hi, padding } => {
                let eps = padding * (hi - lo);
                let p = (x - lo + eps) / (hi - lo + 2.0 * eps);
                (p / (1.0 - p)).ln()
            }
            ColumnTransform::DequantizeBinary { .. } => x + jitter,
            ColumnTransform::Identity => x,
        }
    }

    pub fn invert(&self, y: f64) -> f64 {
        match *self {
            ColumnTransform::Zscore { mean, sd } => y * sd + mean,
            ColumnTransform::MinmaxLogit { lo, hi, padding } => {
                let eps = padding * (hi - lo);
                let p = 1.0 / (1.0 + (-y).exp());
                p * (hi - lo + 2.0 * eps) + lo - eps
            }
            ColumnTransform::DequantizeBinary { threshold } => {
                if y < threshold {
                    0.0
                } else {
                    1.0
                }
            }
            ColumnTransform::Identity => y,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Units {
    Original,
    Model,
}

/// Column name → transform kind, as read from a schema JSON object.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Schema(pub BTreeMap<String, TransformKind>);

impl Schema {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("schema: {e}")))
    }

    pub fn kinds_for(&self, names: &[String]) -> Result<Vec<TransformKind>> {
        names
            .iter()
            .map(|n| {
                self.0
                    .get(n)
                    .copied()
                    .ok_or_else(|| Error::Input(format!("schema has no entry for column {n:?}")))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    /// n × d, rows are observations.
    pub values: Tensor,
    pub kinds: Vec<TransformKind>,
    /// Fitted transforms; `None` until [`fit_apply_transforms`] has run.
    pub transforms: Option<Vec<ColumnTransform>>,
    pub units: Units,
}

impl Dataset {
    /// Wraps a matrix with identity transforms, treating it as original units.
    pub fn from_matrix(names: Vec<String>, values: Tensor) -> Result<Self> {
        if values.cols() != names.len() || !values.is_matrix() {
            return Err(Error::Dimension {
                op: "Dataset::from_matrix",
                left: values.shape().to_vec(),
                right: vec![names.len()],
            });
        }
        let d = names.len();
        Ok(Dataset {
            names,
            values,
            kinds: vec![TransformKind::Identity; d],
            transforms: None,
            units: Units::Original,
        })
    }

    /// Same metadata, different rows.
    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.cols() != self.d() {
            return Err(Error::Dimension {
                op: "Dataset::with_values",
                left: values.shape().to_vec(),
                right: vec![self.d()],
            });
        }
        Ok(Dataset {
            values,
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.values.rows()
    }

    pub fn d(&self) -> usize {
        self.names.len()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n()).map(|i| self.values.at(i, j)).collect()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        let d = self.d();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(self.values.row(r));
        }
        Dataset {
            values: Tensor::matrix(rows.len(), d, data).expect("row selection keeps width"),
            ..self.clone()
        }
    }
}

/// Generic numeric CSV reader: header row plus numeric cells.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_numeric_csv(&text)
}

pub fn parse_numeric_csv(text: &str) -> Result<(Vec<String>, Tensor)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::Input("empty input: no header row".into()))?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if names.iter().any(String::is_empty) {
        return Err(Error::Input("header contains an empty column name".into()));
    }
    if let Some((i, name)) = names.iter().enumerate().find(|(_, n)| n.parse::<f64>().is_ok()) {
        return Err(Error::Input(format!(
            "missing header: column {} is numeric ({name})",
            i + 1
        )));
    }
    let d = names.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (r, line) in lines.enumerate() {
        let row = r + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != d {
            return Err(Error::Parse {
                row,
                col: cells.len().min(d) + 1,
                detail: format!("expected {d} cells, found {}", cells.len()),
            });
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                col: c + 1,
                detail: format!("cannot parse {:?} as a number", cell.trim()),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    col: c + 1,
                    detail: "value is not finite".into(),
                });
            }
            data.push(v);
        }
        n += 1;
    }
    Ok((names, Tensor::matrix(n, d, data)?))
}

/// Loads a CSV in original units; transforms are recorded but not fit.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Dataset> {
    let (names, values) = read_numeric_csv(path)?;
    let kinds = schema.kinds_for(&names)?;
    Ok(Dataset {
        names,
        values,
        kinds,
        transforms: None,
        units: Units::Original,
    })
}

/// Fits one transform per column on `ds` and maps it to model units.
pub fn fit_apply_transforms(ds: &Dataset, seed: u64) -> Result<Dataset> {
    if ds.units != Units::Original {
        return Err(Error::Contract("dataset is already in model units".into()));
    }
    let transforms = ds
        .kinds
        .iter()
        .enumerate()
        .map(|(j, &kind)| ColumnTransform::fit(kind, &ds.names[j], &ds.column(j)))
        .collect::<Result<Vec<_>>>()?;
    apply_transforms(ds, &transforms, seed)
}

/// Maps `ds` to model units with already-fitted transforms.
pub fn apply_transforms(ds: &Dataset, transforms: &[ColumnTransform], seed: u64) -> Result<Dataset> {
    if ds.units != Units::Original {
        return Err(Error::Contract("dataset is already in model units".into()));
    }
    if transforms.len() != ds.d() {
        return Err(Error::Dimension {
            op: "apply_transforms",
            left: vec![transforms.len()],
            right: vec![ds.d()],
        });
    }
    let (n, d) = (ds.n(), ds.d());
    let mut out = ds.values.clone();
    for (j, t) in transforms.iter().enumerate() {
        let mut jitter = rng::stream(rng::derive_seed(seed, j as u64), 0);
        for i in 0..n {
            let u: f64 = if matches!(t, ColumnTransform::DequantizeBinary { .. }) {
                jitter.random::<f64>()
            } else {
                0.0
            };
            let y = t.apply(ds.values.at(i, j), u);
            if !y.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{} transform of column {:?}, row {}",
                    t.kind().name(),
                    ds.names[j],
                    i + 1
                )));
            }
            out.data_mut()[i * d + j] = y;
        }
    }
    Ok(Dataset {
        names: ds.names.clone(),
        values: out,
        kinds: transforms.iter().map(ColumnTransform::kind).collect(),
        transforms: Some(transforms.to_vec()),
        units: Units::Model,
    })
}

pub fn invert_transforms(ds: &Dataset) -> Result<Dataset> {
    if ds.units != Units::Model {
        return Err(Error::Contract("dataset is already in original units".into()));
    }
    let transforms = ds
        .transforms
        .as_ref()
        .ok_or_else(|| Error::Contract("model-unit dataset carries no transforms".into()))?;
    let d = ds.d();
    let mut out = ds.values.clone();
    for (idx, v) in out.data_mut().iter_mut().enumerate() {
        *v = transforms[idx % d].invert(*v);
    }
    Ok(Dataset {
        values: out,
        units: Units::Original,
        ..ds.clone()
    })
}

/// Seeded shuffle, then the first `ceil(fraction·n)` rows go to the first part.
pub fn split(ds: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction {fraction} outside (0, 1)")));
    }
    let (first, second) = split_indices(ds.n(), fraction, seed)?;
    Ok((ds.select_rows(&first), ds.select_rows(&second)))
}

pub(crate) fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let take = (fraction * n as f64).ceil() as usize;
    if n < 2 || take == 0 || take >= n {
        return Err(Error::Contract(format!(
            "split of {n} rows at fraction {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut shuffler = rng::stream(seed, u64::MAX);
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = shuffler.random_range(0..=i);
        idx.swap(i, j);
    }
    let rest = idx.split_off(take);
    Ok((idx, rest))
}

/// Writes header and rows; values use the shortest round-trip decimal form.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    write_table(path, &ds.names, &ds.values)
}

pub fn write_table(path: &Path, names: &[String], values: &Tensor) -> Result<()> {
    let mut buf = String::new();
    buf.push_str(&names.join(","));
    buf.push('\n');
    let d = names.len();
    for i in 0..values.rows() {
        let row = &values.data()[i * d..(i + 1) * d];
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        buf.push_str(&cells.join(","));
        buf.push('\n');
    }
    write_atomic(path, buf.as_bytes())
}

/// Writes via a sibling temp file and rename, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.len() < 2 {
        return (values.first().copied().unwrap_or(0.0), 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
