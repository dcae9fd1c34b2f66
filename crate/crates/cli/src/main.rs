use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use synthflow::dataio::{self, Dataset, Schema, Units};
use synthflow::experiments::{
    run_correlation_study, run_meta_study, write_correlation_outputs, write_meta_outputs, CorrStudyConfig,
    MetaStudyConfig,
};
use synthflow::maf::{self, Architecture, MafModel, ModelColumns, TrainConfig};
use synthflow::meta::{self, MetaResult, StudySummary};
use synthflow::numerics::Tensor;
use synthflow::privacy::{self, PrivacyReport};
use synthflow::rng::derive_seed;
use synthflow::synth::{self, Mechanism, SynthesisSpec};

/// Latent noise injection for privacy-preserving synthetic data.
#[derive(Parser)]
#[command(name = "synthflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit column transforms and a masked autoregressive flow.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Architecture JSON (`hidden_sizes`, `n_flows`); default 50 × 1 × 5 flows.
        #[arg(long)]
        arch: Option<PathBuf>,
        /// Training JSON; every field optional.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Produce a synthetic dataset in original units.
    Synthesize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mechanism: String,
        #[arg(long)]
        w: Option<f64>,
        /// Number of rows for flow sampling.
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distance-based privacy metrics of a synthetic dataset.
    Audit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        synthetic: PathBuf,
        /// Rows not used for synthesis; enables the membership-inference AUC.
        #[arg(long)]
        holdout: Option<PathBuf>,
        /// Noise weight recorded in the report.
        #[arg(long)]
        w: Option<f64>,
        /// CSV report; a JSON copy is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Choose the largest w whose attack AUC stays below a threshold.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        schema: PathBuf,
        /// Comma-separated ascending w values; default 0.05, 0.10, …, 0.95.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value_t = privacy::DEFAULT_AUC_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = privacy::DEFAULT_SPLIT_FRACTION)]
        split: f64,
        #[arg(long)]
        arch: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Random-effects meta-analysis of study summaries.
    Meta {
        /// CSV with columns label,theta_hat,var_hat.
        #[arg(long)]
        studies: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Forest CSV; the pooled result is written as JSON next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a simulation study and write its tables.
    Simulate {
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the full-size budgets instead of the desk-scale defaults.
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Study {
    Correlation,
    Meta,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

const EXIT_INPUT: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_THRESHOLD: u8 = 4;

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn input(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    /// Library error, prefixed with the file or step it came from.
    fn at(context: impl fmt::Display) -> impl FnOnce(synthflow::Error) -> Failure {
        move |e| Failure {
            code: if e.is_numeric() { EXIT_NUMERIC } else { EXIT_INPUT },
            message: format!("{context}: {e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Train {
            data,
            schema,
            arch,
            config,
            seed,
            out,
        } => cmd_train(&data, &schema, arch.as_deref(), config.as_deref(), seed, &out),
        Command::Synthesize {
            model,
            data,
            mechanism,
            w,
            m,
            seed,
            out,
        } => cmd_synthesize(&model, &data, &mechanism, w, m, seed, &out),
        Command::Audit {
            data,
            synthetic,
            holdout,
            w,
            out,
        } => cmd_audit(&data, &synthetic, holdout.as_deref(), w, &out),
        Command::Calibrate {
            data,
            schema,
            grid,
            threshold,
            split,
            arch,
            config,
            seed,
            out,
        } => {
            let grid = grid.unwrap_or_else(privacy::default_grid);
            cmd_calibrate(&data, &schema, &grid, threshold, split, arch.as_deref(), config.as_deref(), seed, &out)
        }
        Command::Meta { studies, alpha, out } => cmd_meta(&studies, alpha, &out),
        Command::Simulate {
            study,
            config,
            preset,
            seed,
            out,
        } => cmd_simulate(study, config.as_deref(), preset.unwrap_or(Preset::Desk), seed, &out),
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    dataio::write_atomic(path, bytes).map_err(Failure::at(path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::input(e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn training_setup(arch: Option<&Path>, config: Option<&Path>, seed: u64) -> CliResult<(Architecture, TrainConfig)> {
    let arch = match arch {
        Some(p) => read_json(p)?,
        None => Architecture::default(),
    };
    let mut cfg: TrainConfig = match config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok((arch, cfg))
}

/// Loads a CSV through a schema and maps it to model units.
fn load_model_units(data: &Path, schema: &Path, seed: u64) -> CliResult<Dataset> {
    let schema = Schema::from_json(&read_text(schema)?).map_err(Failure::at(schema.display()))?;
    let ds = dataio::load_csv(data, &schema).map_err(Failure::at(data.display()))?;
    dataio::fit_apply_transforms(&ds, seed).map_err(Failure::at(data.display()))
}

fn cmd_train(
    data: &Path,
    schema: &Path,
    arch: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let (arch, cfg) = training_setup(arch, config, derive_seed(seed, 1))?;
    let ds = load_model_units(data, schema, derive_seed(seed, 0))?;
    let (mut model, history) = maf::train(&ds.values, &arch, &cfg).map_err(Failure::at("training"))?;
    model.columns = Some(ModelColumns {
        names: ds.names.clone(),
        transforms: ds.transforms.clone().expect("fitted above"),
    });
    maf::save(&model, out).map_err(Failure::at(out.display()))?;
    let train_nll = history.train_loss.get(history.best_step).copied().unwrap_or(f64::NAN);
    print!("trained {} steps (best {}); train NLL {train_nll:.6}", history.steps_run, history.best_step);
    match history.val_loss.get(history.best_step) {
        Some(v) => println!(", validation NLL {v:.6}"),
        None => println!(),
    }
    println!("metadata {}", fingerprint(model.columns.as_ref().expect("set above")));
    Ok(())
}

/// Short hex digest of column names and fitted transforms, printed at
/// training time and compared before synthesis.
fn fingerprint(cols: &ModelColumns) -> String {
    let mut h = Sha256::new();
    for (name, t) in cols.names.iter().zip(&cols.transforms) {
        h.update(name.as_bytes());
        h.update([0]);
        h.update(serde_json::to_string(t).expect("transforms serialize").as_bytes());
        h.update([0]);
    }
    hex::encode(&h.finalize()[..8])
}

fn load_model(path: &Path) -> CliResult<(MafModel, ModelColumns)> {
    let model = maf::load(path).map_err(Failure::at(path.display()))?;
    let cols = model.columns.clone().ok_or_else(|| {
        Failure::input(format!("{}: model carries no column metadata; retrain with `synthflow train`", path.display()))
    })?;
    Ok((model, cols))
}

/// Reads an original-unit CSV and checks it against the model's columns.
fn load_compatible(path: &Path, cols: &ModelColumns) -> CliResult<Dataset> {
    let (names, values) = dataio::read_numeric_csv(path).map_err(Failure::at(path.display()))?;
    if names != cols.names {
        return Err(Failure::input(format!(
            "{}: incompatible with model (metadata {}): model columns [{}], data columns [{}]",
            path.display(),
            fingerprint(cols),
            cols.names.join(","),
            names.join(",")
        )));
    }
    let mut ds = Dataset::from_matrix(names, values).map_err(Failure::at(path.display()))?;
    ds.kinds = cols.transforms.iter().map(|t| t.kind()).collect();
    Ok(ds)
}

fn cmd_synthesize(
    model_path: &Path,
    data: &Path,
    mechanism: &str,
    w: Option<f64>,
    m: Option<usize>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let mechanism = Mechanism::parse(mechanism).map_err(Failure::at("--mechanism"))?;
    let w = match (mechanism, w) {
        (Mechanism::FlowSample, _) => w.unwrap_or(0.0),
        (_, Some(w)) => w,
        (_, None) => return Err(Failure::input(format!("--w is required for {}", mechanism.name()))),
    };
    if mechanism == Mechanism::FlowSample && m.is_none() {
        return Err(Failure::input("--m is required for flow-sample"));
    }
    let (model, cols) = load_model(model_path)?;
    let ds = load_compatible(data, &cols)?;
    let units = dataio::apply_transforms(&ds, &cols.transforms, derive_seed(seed, 0)).map_err(Failure::at(data.display()))?;
    let spec = SynthesisSpec {
        mechanism,
        w,
        seed: derive_seed(seed, 1),
        m,
    };
    let values = synth::synthesize(Some(&model), &units.values, &spec).map_err(Failure::at("synthesis"))?;
    if !values.all_finite() {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: "synthesis produced non-finite values".into(),
        });
    }
    let synthetic = Dataset {
        values,
        units: Units::Model,
        ..units
    };
    let original = dataio::invert_transforms(&synthetic).map_err(Failure::at("synthesis"))?;
    dataio::write_csv(&original, out).map_err(Failure::at(out.display()))?;
    println!("wrote {} rows ({}, w = {w})", original.n(), mechanism.name());
    Ok(())
}

/// Z-scores columns with the real data's moments so every coordinate counts
/// equally in the distances; constant columns are left unscaled.
fn standardizer(x: &Tensor) -> impl Fn(&Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut moments = Vec::with_capacity(d);
    for j in 0..d {
        let mean = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.at(i, j) - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0);
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        moments.push((mean, sd));
    }
    move |t: &Tensor| {
        let mut out = t.clone();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            let (mean, sd) = moments[k % d];
            *v = (*v - mean) / sd;
        }
        out
    }
}

fn read_matching(path: &Path, names: &[String]) -> CliResult<Tensor> {
    let (found, values) = dataio::read_numeric_csv(path).map_err(Failure::at(path.display()))?;
    if found != names {
        return Err(Failure::input(format!(
            "{}: columns [{}] differ from the real data's [{}]",
            path.display(),
            found.join(","),
            names.join(",")
        )));
    }
    Ok(values)
}

fn report_csv(report: &PrivacyReport, w: Option<f64>) -> String {
    let row = report.csv_row();
    let (_, rest) = row.split_once(',').expect("report rows have several cells");
    let w = w.map(|w| w.to_string()).unwrap_or_default();
    format!("{}\n{w},{rest}\n", PrivacyReport::CSV_HEADER)
}

fn cmd_audit(data: &Path, synthetic: &Path, holdout: Option<&Path>, w: Option<f64>, out: &Path) -> CliResult<()> {
    let (names, real) = dataio::read_numeric_csv(data).map_err(Failure::at(data.display()))?;
    let synth_raw = read_matching(synthetic, &names)?;
    let scale = standardizer(&real);
    let (x, s) = (scale(&real), scale(&synth_raw));

    let auc = match holdout {
        Some(p) => {
            let h = scale(&read_matching(p, &names)?);
            let members = privacy::membership_scores(&x, &s).map_err(Failure::at("audit"))?;
            let others = privacy::membership_scores(&h, &s).map_err(Failure::at("audit"))?;
            Some(privacy::mia_auc(&members, &others).map_err(Failure::at("audit"))?)
        }
        None => None,
    };
    let report = if x.rows() == s.rows() {
        privacy::matched_report(w.unwrap_or(f64::NAN), &x, &s, auc).map_err(Failure::at("audit"))?
    } else if auc.is_some() {
        PrivacyReport {
            w: w.unwrap_or(f64::NAN),
            auc,
            closer_prob: None,
            median_rank: None,
            n: x.rows(),
        }
    } else {
        return Err(Failure::input(format!(
            "{} has {} rows but {} has {}; rank and closer-real metrics need matched rows. \
             For flow samples use AUC-only mode by passing --holdout",
            data.display(),
            x.rows(),
            synthetic.display(),
            s.rows()
        )));
    };

    write_file(out, report_csv(&report, w).as_bytes())?;
    #[derive(Serialize)]
    struct AuditJson {
        w: Option<f64>,
        auc: Option<f64>,
        closer_prob: Option<f64>,
        median_rank: Option<usize>,
        n: usize,
    }
    write_json(
        &out.with_extension("json"),
        &AuditJson {
            w,
            auc: report.auc,
            closer_prob: report.closer_prob,
            median_rank: report.median_rank,
            n: report.n,
        },
    )?;
    let show = |v: Option<String>| v.unwrap_or_else(|| "-".into());
    println!(
        "n {}; auc {}; closer_prob {}; median_rank {}",
        report.n,
        show(report.auc.map(|a| format!("{a:.4}"))),
        show(report.closer_prob.map(|p| format!("{p:.4}"))),
        show(report.median_rank.map(|r| r.to_string()))
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_calibrate(
    data: &Path,
    schema: &Path,
    grid: &[f64],
    threshold: f64,
    split: f64,
    arch: Option<&Path>,
    config: Option<&Path>,
    seed: u64,
    out: &Path,
) -> CliResult<()> {
    let (arch, cfg) = training_setup(arch, config, derive_seed(seed, 1))?;
    let ds = load_model_units(data, schema, derive_seed(seed, 0))?;
    let cal = privacy::calibrate_w(
        &ds.values,
        |members| maf::train(members, &arch, &cfg).map(|(m, _)| m),
        grid,
        threshold,
        split,
        derive_seed(seed, 2),
    )
    .map_err(Failure::at("calibration"))?;
    write_file(out, privacy::reports_to_csv(&cal.reports).as_bytes())?;
    write_json(&out.with_extension("json"), &cal)?;
    for r in &cal.reports {
        println!("w {:<6} auc {:.4}", r.w, r.auc.unwrap_or(f64::NAN));
    }
    if cal.threshold_met {
        println!("selected w* = {}", cal.selected_w);
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_THRESHOLD,
            message: format!(
                "no w on the grid keeps the attack AUC below {threshold}; report written to {}",
                out.display()
            ),
        })
    }
}

/// Label of the pooled row when only one study is available.
const FIXED_FALLBACK_LABEL: &str = "fixed-effects (warning: fewer than two studies)";

fn cmd_meta(studies_path: &Path, alpha: f64, out: &Path) -> CliResult<()> {
    let studies: Vec<StudySummary> =
        meta::read_studies_csv(studies_path).map_err(Failure::at(studies_path.display()))?;
    let at = Failure::at("meta-analysis");
    let (result, warning) = if studies.len() >= 2 {
        (meta::random_effects(&studies, alpha).map_err(at)?, None)
    } else {
        (fixed_fallback(&studies, alpha).map_err(at)?, Some(FIXED_FALLBACK_LABEL))
    };
    let mut rows = meta::forest_export(&studies, &result).map_err(Failure::at("meta-analysis"))?;
    if let Some(label) = warning {
        rows.last_mut().expect("pooled row").label = label.into();
        eprintln!("warning: {} study; random effects need two, reporting fixed effects", studies.len());
    }
    let text = meta::forest_to_csv(&rows).map_err(Failure::at(out.display()))?;
    write_file(out, text.as_bytes())?;
    #[derive(Serialize)]
    struct MetaJson<'a> {
        #[serde(flatten)]
        result: &'a MetaResult,
        warning: Option<&'a str>,
    }
    write_json(
        &out.with_extension("json"),
        &MetaJson {
            result: &result,
            warning,
        },
    )?;
    println!(
        "pooled {:.6} [{:.6}, {:.6}]; tau2 {:.6}; K = {}",
        result.theta_r, result.ci_low, result.ci_high, result.tau2_hat, result.k
    );
    Ok(())
}

fn fixed_fallback(studies: &[StudySummary], alpha: f64) -> synthflow::Result<MetaResult> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(synthflow::Error::Contract(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let (theta, var) = meta::fixed_effects(studies)?;
    let half = meta::inverse_normal(1.0 - alpha / 2.0)? * var.sqrt();
    Ok(MetaResult {
        theta_f: theta,
        var_f: var,
        tau2_hat: 0.0,
        theta_r: theta,
        var_r: var,
        ci_low: theta - half,
        ci_high: theta + half,
        alpha,
        k: studies.len(),
    })
}

fn cmd_simulate(study: Study, config: Option<&Path>, preset: Preset, seed: u64, out: &Path) -> CliResult<()> {
    let started = Instant::now();
    let out_err = Failure::at(out.display());
    match study {
        Study::Correlation => {
            let mut cfg = match (config, preset) {
                (Some(p), _) => read_json(p)?,
                (None, Preset::Paper) => CorrStudyConfig::paper_scale(),
                (None, Preset::Desk) => CorrStudyConfig::default(),
            };
            cfg.seed = seed;
            let res = run_correlation_study(&cfg).map_err(Failure::at("correlation study"))?;
            write_correlation_outputs(out, &cfg, &res).map_err(out_err)?;
            for r in &res.rates {
                let w = r.w.map(|w| format!(" w={w}")).unwrap_or_default();
                println!("{}{w}: alpha {:.3}", r.source.name(), r.alpha);
            }
            if !res.failures.is_empty() {
                eprintln!("warning: {} flow fits failed; see manifest.json", res.failures.len());
            }
        }
        Study::Meta => {
            let mut cfg = match (config, preset) {
                (Some(p), _) => read_json(p)?,
                (None, Preset::Paper) => MetaStudyConfig::paper_scale(),
                (None, Preset::Desk) => MetaStudyConfig::default(),
            };
            cfg.seed = seed;
            let res = run_meta_study(&cfg).map_err(Failure::at("meta study"))?;
            write_meta_outputs(out, &cfg, &res).map_err(out_err)?;
            for s in &res.summary {
                let name = s.w.map(|w| format!("w={w}")).unwrap_or_else(|| "real".into());
                println!(
                    "{name}: mad vs real {:.5}, mad vs truth {:.5}, coverage {:.3}",
                    s.mad_vs_real, s.mad_vs_truth, s.coverage
                );
            }
            if !res.failures.is_empty() {
                eprintln!("warning: {} replications failed; see manifest.json", res.failures.len());
            }
        }
    }
    println!("wrote {} in {:.1}s", out.display(), started.elapsed().as_secs_f64());
    Ok(())
}
