//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthflow::experiments::{
    compound_symmetry_sample, run_correlation_study, run_meta_study, CorrStudyConfig, MetaStudyConfig, Source,
};
use synthflow::maf::{self, nll_with_gradients, Architecture, MafModel, TrainConfig};
use synthflow::made::spectral_normalize;
use synthflow::meta::{random_effects, StudySummary};
use synthflow::numerics::Tensor;
use synthflow::privacy::{dp_epsilon, dp_w_bound, membership_scores, mia_auc};
use synthflow::stats::cs_corr_mle;
use synthflow::synth::{latent_noise_inject, latent_noise_inject_with, Mechanism, NoiseBank};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn lib<T>(r: synthflow::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// Direct noise shrinks every pairwise correlation by w, so the bias of the
/// compound-symmetry estimate is −(1 − w)·ρ.
fn direct_noise_bias() -> Outcome {
    let cfg = CorrStudyConfig {
        sample_sizes: vec![10_000],
        ws: vec![0.0, 0.25, 0.5, 0.75],
        mechanisms: vec![Mechanism::DirectNoise],
        replications: 25,
        ..Default::default()
    };
    let res = lib(run_correlation_study(&cfg))?;
    let mut parts = Vec::new();
    for c in res.cells.iter().filter(|c| c.source == Source::DirectNoise) {
        let w = c.w.expect("direct cells carry w");
        let expected = -(1.0 - w) * cfg.rho;
        ensure((c.bias - expected).abs() <= 0.02, || {
            format!("w={w}: bias {:.4}, expected {expected:.4}", c.bias)
        })?;
        parts.push(format!("w={w}: {:.4}", c.bias));
    }
    Ok(format!("bias {}", parts.join(", ")))
}

/// At w = 1 latent noise injection returns the data; the round trip through
/// the trained flow must also preserve the estimate.
fn latent_identity() -> Outcome {
    let x = compound_symmetry_sample(10_000, 5, 0.9, 41);
    let cfg = TrainConfig {
        max_iters: 50,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let (model, _) = lib(maf::train(&x, &Architecture::default(), &cfg))?;
    let real = lib(cs_corr_mle(&x))?;
    let synth = lib(latent_noise_inject(&model, &x, 1.0, 7))?;
    let at_one = (lib(cs_corr_mle(&synth))? - real).abs();
    let (z, _) = lib(model.inverse_batch(&x))?;
    let back = lib(model.forward_batch(&z))?;
    let round_trip = (lib(cs_corr_mle(&back))? - real).abs();
    ensure(at_one <= 1e-6 && round_trip <= 1e-6, || {
        format!("|Δρ̂| = {at_one:.2e} at w = 1, {round_trip:.2e} through the flow")
    })?;
    Ok(format!("|Δρ̂| = {at_one:.1e} at w = 1, {round_trip:.1e} through the flow"))
}

fn flow_sampling_fidelity() -> Outcome {
    let x = compound_symmetry_sample(10_000, 5, 0.9, 43);
    let cfg = TrainConfig {
        max_iters: 500,
        seed: 1,
        ..Default::default()
    };
    let (model, _) = lib(maf::train(&x, &Architecture::default(), &cfg))?;
    let samples = lib(model.sample(50_000, 2))?;
    let bias = lib(cs_corr_mle(&samples))? - 0.9;
    ensure(bias.abs() <= 0.01, || format!("bias {bias:.4}"))?;
    Ok(format!("bias {bias:.4}"))
}

/// Training budget per flow in the convergence-rate study.
const RATE_STEPS: usize = 120;
const RATE_LEARNING_RATE: f64 = 1e-2;

fn convergence_rate_ordering() -> Outcome {
    let cfg = CorrStudyConfig {
        ws: vec![0.0, 0.75],
        mechanisms: vec![Mechanism::LatentNoise],
        replications: 25,
        train: TrainConfig {
            max_iters: RATE_STEPS,
            learning_rate: RATE_LEARNING_RATE,
            ..Default::default()
        },
        ..Default::default()
    };
    let res = lib(run_correlation_study(&cfg))?;
    let alpha = |w: f64| {
        res.rates
            .iter()
            .find(|r| r.source == Source::LatentNoise && r.w == Some(w))
            .map(|r| r.alpha)
            .ok_or_else(|| format!("no rate fitted for w = {w}"))
    };
    let (a0, a75) = (alpha(0.0)?, alpha(0.75)?);
    let summary = format!("α(0) = {a0:.3}, α(0.75) = {a75:.3}, {} failed fits", res.failures.len());
    ensure(a75 >= a0 && a75 >= 0.35, || summary.clone())?;
    Ok(summary)
}

fn mia_endpoints() -> Outcome {
    let members = compound_symmetry_sample(2500, 5, 0.9, 51);
    let others = compound_symmetry_sample(2500, 5, 0.9, 52);
    let cfg = TrainConfig {
        seed: 3,
        ..Default::default()
    };
    let (model, _) = lib(maf::train(&members, &Architecture::default(), &cfg))?;
    let bank = NoiseBank::new(4, members.rows(), members.cols());
    let auc = |w: f64| -> Result<f64, String> {
        let synth = lib(latent_noise_inject_with(&model, &members, w, &bank))?;
        let m = lib(membership_scores(&members, &synth))?;
        let o = lib(membership_scores(&others, &synth))?;
        lib(mia_auc(&m, &o))
    };
    let (low, high) = (auc(0.0)?, auc(0.975)?);
    let summary = format!("AUC {low:.3} at w = 0, {high:.3} at w = 0.975");
    ensure((0.45..=0.55).contains(&low) && high >= 0.6, || summary.clone())?;
    Ok(summary)
}

fn meta_fidelity() -> Outcome {
    let cfg = MetaStudyConfig::default();
    let res = lib(run_meta_study(&cfg))?;
    let at = |w: f64| {
        res.summary
            .iter()
            .find(|s| s.w == Some(w))
            .copied()
            .ok_or_else(|| format!("no summary for w = {w}"))
    };
    let (s0, s8) = (at(0.0)?, at(0.8)?);
    let summary = format!(
        "MAD(0.8) = {:.5}, MAD(0) = {:.5}, coverage(0.8) = {:.2}, {} replications",
        s8.mad_vs_real, s0.mad_vs_real, s8.coverage, s8.replications
    );
    ensure(
        s8.mad_vs_real <= 0.01 && s0.mad_vs_real > s8.mad_vs_real && (0.88..=1.0).contains(&s8.coverage),
        || summary.clone(),
    )?;
    Ok(summary)
}

fn random_model(d: usize, hidden: &[usize], n_flows: usize, seed: u64) -> MafModel {
    let arch = Architecture {
        hidden_sizes: hidden.to_vec(),
        n_flows,
    };
    let mut m = MafModel::init(d, &arch, seed).expect("valid architecture");
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for layer in &mut m.layers {
        let p = &mut layer.made;
        for b in p.hidden_biases.iter_mut().chain([&mut p.mu_bias, &mut p.log_sigma_bias]) {
            b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
    }
    m
}

fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("non-empty");
        a.swap(c, p);
        acc += a[c][c].abs().ln();
        for r in (c + 1)..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

fn fd_jacobian(m: &MafModel, x: &[f64], h: f64) -> Result<Vec<Vec<f64>>, String> {
    let d = x.len();
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[j] += h;
        xm[j] -= h;
        let (zp, _) = lib(m.inverse(&xp))?;
        let (zm, _) = lib(m.inverse(&xm))?;
        for i in 0..d {
            jac[i][j] = (zp[i] - zm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Largest singular value from cyclic Jacobi on the Gram matrix.
fn top_singular_value(w: &Tensor) -> f64 {
    let n = w.cols();
    let mut g: Vec<Vec<f64>> = (0..n)
        .map(|p| (0..n).map(|q| (0..w.rows()).map(|i| w.at(i, p) * w.at(i, q)).sum()).collect())
        .collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|p| ((p + 1)..n).map(move |q| (p, q))).map(|(p, q)| g[p][q].powi(2)).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if g[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (g[q][q] - g[p][p]) / (2.0 * g[p][q]);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for row in g.iter_mut() {
                    let (a, b) = (row[p], row[q]);
                    row[p] = c * a - s * b;
                    row[q] = s * a + c * b;
                }
                for k in 0..n {
                    let (a, b) = (g[p][k], g[q][k]);
                    g[p][k] = c * a - s * b;
                    g[q][k] = s * a + c * b;
                }
            }
        }
    }
    (0..n).map(|i| g[i][i]).fold(0.0, f64::max).sqrt()
}

fn auc_by_pairs(m: &[f64], o: &[f64]) -> f64 {
    let mut wins = 0.0;
    for a in m {
        for b in o {
            wins += if a < b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (m.len() * o.len()) as f64
}

fn dl_oracle(s: &[(f64, f64)]) -> (f64, f64) {
    let (mut a, mut b, mut c, mut e) = (0.0, 0.0, 0.0, 0.0);
    for &(t, v) in s {
        a += 1.0 / v;
        b += t / v;
        c += t * t / v;
        e += 1.0 / (v * v);
    }
    let tau2 = f64::max(0.0, (c - b * b / a - (s.len() as f64 - 1.0)) / (a - e / a));
    let (ar, br) = s.iter().fold((0.0, 0.0), |(x, y), &(t, v)| (x + 1.0 / (v + tau2), y + t / (v + tau2)));
    (tau2, br / ar)
}

fn property_suite() -> Outcome {
    let mut r = ChaCha8Rng::seed_from_u64(2024);

    let mut round_trip: f64 = 0.0;
    for d in [1, 2, 3, 5, 8] {
        let m = random_model(d, &[12], 4, d as u64);
        let z = Tensor::matrix(100, d, (0..100 * d).map(|_| r.random_range(-3.0..3.0)).collect()).expect("shape");
        let (back, _) = lib(m.inverse_batch(&lib(m.forward_batch(&z))?))?;
        round_trip = back.data().iter().zip(z.data()).map(|(a, b)| (a - b).abs()).fold(round_trip, f64::max);
    }
    ensure(round_trip <= 1e-6, || format!("round trip error {round_trip:.2e}"))?;

    let mut logdet_err: f64 = 0.0;
    for d in 1..=4 {
        let m = random_model(d, &[10], 3, 10 + d as u64);
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let (_, logdet) = lib(m.inverse(&x))?;
            logdet_err = logdet_err.max((log_abs_det(fd_jacobian(&m, &x, 1e-5)?) - logdet).abs());
        }
    }
    ensure(logdet_err <= 1e-4, || format!("log-det error {logdet_err:.2e}"))?;

    let data = Tensor::from_rows(&[vec![0.3, -0.8, 1.2], vec![-1.1, 0.5, 0.1], vec![0.7, 0.2, -0.4]]).expect("rows");
    let m = random_model(3, &[6], 2, 31);
    let (_, grads) = lib(nll_with_gradients(&m, &data))?;
    let mut grad_err: f64 = 0.0;
    let h = 1e-5;
    let per_layer = m.layers[0].made.tensors().len();
    for (gi, g) in grads.iter().enumerate() {
        let (layer, t) = (gi / per_layer, gi % per_layer);
        let made = &m.layers[layer].made;
        let n_hidden = made.hidden_weights.len();
        // gradients only exist on connections the masks allow
        let mask = match t {
            t if t < 2 * n_hidden && t % 2 == 0 => Some(&made.masks.hidden[t / 2]),
            t if t == 2 * n_hidden || t == 2 * n_hidden + 2 => Some(&made.masks.output),
            _ => None,
        };
        for k in 0..g.len() {
            if mask.is_some_and(|mk| mk.data()[k] == 0.0) {
                ensure(g.data()[k] == 0.0, || format!("nonzero gradient on masked entry {k} of tensor {t}"))?;
                continue;
            }
            let bump = |delta: f64| -> Result<f64, String> {
                let mut p = m.clone();
                p.layers[layer].made.tensors_mut()[t].data_mut()[k] += delta;
                lib(p.mean_nll(&data))
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let an = g.data()[k];
            grad_err = grad_err.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
        }
    }
    ensure(grad_err <= 1e-4, || format!("gradient relative error {grad_err:.2e}"))?;

    // one layer: latent coordinate π_i may only depend on data coordinates π_j, j ≤ i
    let mut leak: f64 = 0.0;
    for d in [2, 3, 5] {
        let m = random_model(d, &[16, 16], 1, 70 + d as u64);
        let order = m.layers[0].order.clone();
        let x: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let jac = fd_jacobian(&m, &x, 1e-4)?;
        for i in 0..d {
            for j in (i + 1)..d {
                leak = leak.max(jac[order[i]][order[j]].abs());
            }
        }
    }
    ensure(leak <= 1e-8, || format!("autoregressive leak {leak:.2e}"))?;

    for _ in 0..200 {
        let draw = |r: &mut ChaCha8Rng| -> Vec<f64> {
            let k = r.random_range(1..30);
            (0..k).map(|_| r.random_range(0..6) as f64 * 0.5).collect()
        };
        let (m, o) = (draw(&mut r), draw(&mut r));
        let got = lib(mia_auc(&m, &o))?;
        ensure(got == auc_by_pairs(&m, &o), || format!("AUC {got} differs from pair enumeration"))?;
    }

    let mut dl_err: f64 = 0.0;
    for _ in 0..1000 {
        let k = r.random_range(2..15);
        let s: Vec<(f64, f64)> = (0..k).map(|_| (r.random_range(-2.0..2.0), r.random_range(0.01..2.0))).collect();
        let studies: Vec<StudySummary> =
            s.iter().enumerate().map(|(i, &(t, v))| StudySummary::new(format!("s{i}"), t, v)).collect();
        let got = lib(random_effects(&studies, 0.05))?;
        let (tau2, theta) = dl_oracle(&s);
        dl_err = dl_err
            .max((got.tau2_hat - tau2).abs() / (1.0 + tau2))
            .max((got.theta_r - theta).abs() / theta.abs().max(1.0));
    }
    ensure(dl_err <= 1e-10, || format!("DerSimonian–Laird error {dl_err:.2e}"))?;

    let eps: Vec<f64> = (1..100).map(|k| dp_epsilon(1.0, k as f64 / 100.0, 0.01)).collect::<synthflow::Result<_>>().map_err(|e| e.to_string())?;
    let tiny = lib(dp_epsilon(1.0, 1e-12, 0.01))?;
    let e1 = lib(dp_epsilon(1.0, 0.5, 0.01))?;
    let w1 = lib(dp_w_bound(1.0, 0.5, 0.1))?;
    ensure(
        eps.windows(2).all(|p| p[1] > p[0])
            && tiny < 1e-5
            && (e1 - 3.534_854_258_770_292_7).abs() <= 1e-6
            && (w1 - 0.062_990_128_951_263_4).abs() <= 1e-6,
        || format!("dp: ε(0.5) = {e1}, w bound = {w1}, ε(1e-12) = {tiny}"),
    )?;

    let mut top: f64 = 0.0;
    for k in 0..20 {
        let (rows, cols) = (r.random_range(2..12), r.random_range(2..12));
        let w = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-2.0..2.0)).collect()).expect("shape");
        top = top.max((top_singular_value(&spectral_normalize(&w, 20, k)) - 1.0).abs());
    }
    let x = compound_symmetry_sample(500, 4, 0.9, 9);
    let cfg = TrainConfig {
        max_iters: 30,
        learning_rate: 1e-2,
        ..Default::default()
    };
    let (trained, _) = lib(maf::train(&x, &Architecture { hidden_sizes: vec![16], n_flows: 2 }, &cfg))?;
    let mut trained_top: f64 = 0.0;
    for layer in &trained.layers {
        let p = &layer.made;
        for w in p.hidden_weights.iter().chain([&p.mu_weight, &p.log_sigma_weight]) {
            trained_top = trained_top.max(top_singular_value(w));
        }
    }
    ensure(top <= 1e-3 && trained_top <= 1.0 + 1e-3, || {
        format!("spectral norm: |σ−1| = {top:.2e} after normalizing, σ = {trained_top:.4} after training")
    })?;

    Ok(format!(
        "round trip {round_trip:.1e}, log-det {logdet_err:.1e}, gradient {grad_err:.1e}, leak {leak:.1e}, \
         DL {dl_err:.1e}, σ_max {trained_top:.4}"
    ))
}

fn bin(args: &[&str], threads: &str) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_synthflow"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || {
        format!("synthflow {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr))
    })
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .filter(|e| e.path().is_file())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default();
    out.sort();
    out
}

/// Runs every subcommand into two directories (the second with more worker
/// threads) and compares the outputs byte for byte.
fn determinism() -> Outcome {
    let root = tempfile::tempdir().map_err(|e| e.to_string())?;
    let shared = root.path();
    let x = compound_symmetry_sample(300, 3, 0.6, 5);
    let mut csv = String::from("a,b,c\n");
    for i in 0..x.rows() {
        csv.push_str(&format!("{},{},{}\n", x.at(i, 0), 10.0 + x.at(i, 1), (x.at(i, 2) > 0.0) as u8));
    }
    let s = |name: &str| shared.join(name).to_string_lossy().into_owned();
    fs::write(s("data.csv"), csv).map_err(|e| e.to_string())?;
    fs::write(s("schema.json"), r#"{"a": "zscore", "b": "minmax-logit", "c": "dequantize-binary"}"#)
        .map_err(|e| e.to_string())?;
    fs::write(s("arch.json"), r#"{"hidden_sizes": [16], "n_flows": 2}"#).map_err(|e| e.to_string())?;
    fs::write(s("train.json"), r#"{"max_iters": 40, "learning_rate": 0.01}"#).map_err(|e| e.to_string())?;
    fs::write(s("studies.csv"), "label,theta_hat,var_hat\nA,0.1,0.02\nB,0.3,0.05\nC,-0.1,0.01\n")
        .map_err(|e| e.to_string())?;
    fs::write(
        s("corr.json"),
        r#"{"sample_sizes": [200, 400, 800], "replications": 3, "architecture": {"hidden_sizes": [8], "n_flows": 2},
            "train": {"max_iters": 10}, "flow_sample_size": 300}"#,
    )
    .map_err(|e| e.to_string())?;
    fs::write(
        s("meta.json"),
        r#"{"k": 3, "n_range": [150, 200], "replications": 3, "architecture": {"hidden_sizes": [8], "n_flows": 2},
            "train": {"max_iters": 10, "validation_fraction": 0.3}, "fine_tune_steps": 3}"#,
    )
    .map_err(|e| e.to_string())?;

    let mut outputs = Vec::new();
    for (run, threads) in [("one", "1"), ("two", "4")] {
        let dir = shared.join(run);
        fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
        let o = |name: &str| dir.join(name).to_string_lossy().into_owned();
        bin(&["train", "--data", &s("data.csv"), "--schema", &s("schema.json"), "--arch", &s("arch.json"),
              "--config", &s("train.json"), "--seed", "1", "--out", &o("model.sfm")], threads)?;
        for (mech, extra) in [("latent-noise", ["--w", "0.6"]), ("direct-noise", ["--w", "0.6"]), ("flow-sample", ["--m", "150"])] {
            let (model, data, out) = (o("model.sfm"), s("data.csv"), o(&format!("{mech}.csv")));
            let mut args = vec!["synthesize", "--model", &model, "--data", &data, "--mechanism", mech, "--seed", "2"];
            args.extend_from_slice(&extra);
            args.extend_from_slice(&["--out", &out]);
            bin(&args, threads)?;
        }
        bin(&["audit", "--data", &s("data.csv"), "--synthetic", &o("latent-noise.csv"), "--holdout", &s("data.csv"),
              "--w", "0.6", "--out", &o("audit.csv")], threads)?;
        bin(&["calibrate", "--data", &s("data.csv"), "--schema", &s("schema.json"), "--arch", &s("arch.json"),
              "--config", &s("train.json"), "--grid", "0,0.5", "--threshold", "0.9", "--seed", "3",
              "--out", &o("calibration.csv")], threads)?;
        bin(&["meta", "--studies", &s("studies.csv"), "--out", &o("forest.csv")], threads)?;
        bin(&["simulate", "--study", "correlation", "--config", &s("corr.json"), "--seed", "4", "--out", &o("corr")], threads)?;
        bin(&["simulate", "--study", "meta", "--config", &s("meta.json"), "--seed", "5", "--out", &o("meta")], threads)?;
        let mut files = tree_bytes(&dir);
        files.extend(tree_bytes(&dir.join("corr")).into_iter().map(|(n, b)| (format!("corr/{n}"), b)));
        files.extend(tree_bytes(&dir.join("meta")).into_iter().map(|(n, b)| (format!("meta/{n}"), b)));
        outputs.push(files);
    }
    ensure(outputs[0].len() == 18, || format!("only {} output files", outputs[0].len()))?;
    for (a, b) in outputs[0].iter().zip(&outputs[1]) {
        ensure(a == b, || format!("{} differs between runs", a.0))?;
    }
    ensure(outputs[0].len() == outputs[1].len(), || "runs wrote different file sets".into())?;

    // the library studies, reduced in a 4-thread pool against the global pool
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().map_err(|e| e.to_string())?;
    let corr = CorrStudyConfig {
        sample_sizes: vec![200, 400],
        replications: 4,
        architecture: Architecture { hidden_sizes: vec![8], n_flows: 2 },
        train: TrainConfig { max_iters: 5, ..Default::default() },
        ..Default::default()
    };
    ensure(lib(run_correlation_study(&corr))? == lib(pool.install(|| run_correlation_study(&corr)))?, || {
        "correlation study depends on the thread count".into()
    })?;
    let meta = MetaStudyConfig {
        k: 3,
        n_range: [150, 200],
        replications: 4,
        architecture: Architecture { hidden_sizes: vec![8], n_flows: 2 },
        train: TrainConfig { max_iters: 10, validation_fraction: 0.3, ..Default::default() },
        fine_tune_steps: 3,
        ..Default::default()
    };
    ensure(lib(run_meta_study(&meta))? == lib(pool.install(|| run_meta_study(&meta)))?, || {
        "meta study depends on the thread count".into()
    })?;
    Ok(format!("{} files identical across runs and thread counts", outputs[0].len()))
}

struct Criterion {
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion { name: "direct-noise bias law", budget: Duration::from_secs(60), check: direct_noise_bias },
        Criterion { name: "latent-noise identity limit", budget: Duration::from_secs(60), check: latent_identity },
        Criterion { name: "flow-sampling fidelity", budget: Duration::from_secs(180), check: flow_sampling_fidelity },
        Criterion { name: "convergence-rate ordering", budget: Duration::from_secs(900), check: convergence_rate_ordering },
        Criterion { name: "membership-inference AUC endpoints", budget: Duration::from_secs(120), check: mia_endpoints },
        Criterion { name: "meta-analysis fidelity", budget: Duration::from_secs(1200), check: meta_fidelity },
        Criterion { name: "property suite", budget: Duration::from_secs(30), check: property_suite },
        Criterion { name: "determinism", budget: Duration::from_secs(600), check: determinism },
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = (c.check)();
        let took = start.elapsed();
        let verdict = match result {
            Ok(detail) if took <= c.budget => Ok(detail),
            Ok(detail) => Err(format!("{detail}; took {:.0}s, budget {}s", took.as_secs_f64(), c.budget.as_secs())),
            Err(e) => Err(e),
        };
        match verdict {
            Ok(detail) => println!("criterion {} PASS  {} ({:.1}s): {detail}", i + 1, c.name, took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL  {} ({:.1}s): {detail}", i + 1, c.name, took.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
