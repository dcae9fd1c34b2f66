use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use synthflow::dataio::ColumnTransform;
use synthflow::maf::{
    layer_orders, load, nll_with_gradients, nll_with_gradients_tape, read_model, save, train, train_from,
    write_model, Architecture, MafModel, ModelColumns, TrainConfig, FORMAT_VERSION,
};
use synthflow::made::MadeParams;
use synthflow::numerics::Tensor;
use synthflow::{rng, Error};

/// Random model with non-trivial biases so every layer actually moves points.
fn random_model(d: usize, hidden: &[usize], n_flows: usize, seed: u64) -> MafModel {
    let arch = Architecture {
        hidden_sizes: hidden.to_vec(),
        n_flows,
    };
    let mut m = MafModel::init(d, &arch, seed).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for layer in &mut m.layers {
        for b in layer.made.hidden_biases.iter_mut() {
            b.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        }
        layer.made.mu_bias.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
        layer.made.log_sigma_bias.data_mut().iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    }
    m
}

fn affine_model(c: f64, s: f64) -> MafModel {
    let mut made = MadeParams::zeros(1, &[4], 0).unwrap();
    made.mu_bias.data_mut()[0] = c;
    made.log_sigma_bias.data_mut()[0] = s.ln();
    MafModel::new(vec![synthflow::maf::FlowLayer { order: vec![0], made }]).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// log|det| by LU with partial pivoting.
fn log_abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut acc = 0.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        let pivot = a[c][c];
        acc += pivot.abs().ln();
        for r in (c + 1)..n {
            let f = a[r][c] / pivot;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    acc
}

#[test]
fn identity_flow_is_identity() {
    let m = MafModel::identity(3, 2, &[6]).unwrap();
    let x = [0.3, -1.2, 2.5];
    let (z, logdet) = m.inverse(&x).unwrap();
    assert_eq!(z, x);
    assert_eq!(logdet, 0.0);
    assert_eq!(m.forward(&x).unwrap(), x);
}

#[test]
fn log_prob_at_origin() {
    let m = MafModel::identity(2, 1, &[4]).unwrap();
    assert!((m.log_prob(&[0.0, 0.0]).unwrap() - (-1.837877)).abs() < 1e-6);
}

#[test]
fn affine_flow_matches_closed_form() {
    let (c, s) = (1.5, 0.4);
    let m = affine_model(c, s);
    for x in [-2.0, 0.0, 1.5, 3.7] {
        let (z, logdet) = m.inverse(&[x]).unwrap();
        assert!((z[0] - (x - c) / s).abs() < 1e-12);
        assert!((logdet + s.ln()).abs() < 1e-12);
        let u = (x - c) / s;
        let expected = -0.5 * u * u - 0.5 * (2.0 * std::f64::consts::PI).ln() - s.ln();
        assert!((m.log_prob(&[x]).unwrap() - expected).abs() < 1e-12);
    }
}

#[test]
fn affine_flow_sample_moments() {
    let (c, s) = (-0.7, 2.3);
    let m = affine_model(c, s);
    let n = 100_000;
    let x = m.sample(n, 17).unwrap();
    let mean = x.data().iter().sum::<f64>() / n as f64;
    let sd = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let tol = 4.0 / (n as f64).sqrt();
    assert!((mean - c).abs() < tol * s, "mean {mean}");
    assert!((sd - s).abs() < tol * s, "sd {sd}");
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let m = MafModel::identity(3, 2, &[5]).unwrap();
    let n = 20_000;
    let x = m.sample(n, 5).unwrap();
    assert_eq!(x, rng::gaussian_rows(5, n, 3));
    for j in 0..3 {
        let mean = (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }
}

#[test]
fn forward_matches_two_step_recurrence() {
    let m = random_model(2, &[8], 1, 4);
    let made = &m.layers[0].made;
    assert_eq!(m.layers[0].order, vec![0, 1]);
    let z = [0.7, -1.1];
    // x1 = μ1 + z1 σ1 with μ1, σ1 constant; x2 = μ2(x1) + z2 σ2(x1)
    let (mu, ls) = synthflow::made::made_forward(made, &[0.0, 0.0]).unwrap();
    let x1 = mu[0] + z[0] * ls[0].exp();
    let (mu, ls) = synthflow::made::made_forward(made, &[x1, 0.0]).unwrap();
    let x2 = mu[1] + z[1] * ls[1].exp();
    let x = m.forward(&z).unwrap();
    assert!(max_abs_diff(&x, &[x1, x2]) < 1e-14);
}

#[test]
fn round_trip_on_random_probes() {
    let mut r = ChaCha8Rng::seed_from_u64(99);
    for d in [1, 2, 3, 5, 8] {
        let m = random_model(d, &[12], 4, d as u64);
        let probes: Vec<f64> = (0..100 * d).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = Tensor::matrix(100, d, probes).unwrap();
        let x = m.forward_batch(&z).unwrap();
        let (back, _) = m.inverse_batch(&x).unwrap();
        assert!(max_abs_diff(back.data(), z.data()) < 1e-6, "d = {d}");
        let (zz, _) = m.inverse_batch(&z).unwrap();
        let xx = m.forward_batch(&zz).unwrap();
        assert!(max_abs_diff(xx.data(), z.data()) < 1e-6, "d = {d}");
    }
}

#[test]
fn logdet_matches_finite_difference_jacobian() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for (d, layers) in [(2, 2), (3, 3), (4, 3)] {
        let m = random_model(d, &[10], layers, 10 + d as u64);
        for _ in 0..5 {
            let x: Vec<f64> = (0..d).map(|_| r.random_range(-2.0..2.0)).collect();
            let (_, logdet) = m.inverse(&x).unwrap();
            let h = 1e-5;
            let mut jac = vec![vec![0.0; d]; d];
            for j in 0..d {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[j] += h;
                xm[j] -= h;
                let (zp, _) = m.inverse(&xp).unwrap();
                let (zm, _) = m.inverse(&xm).unwrap();
                for i in 0..d {
                    jac[i][j] = (zp[i] - zm[i]) / (2.0 * h);
                }
            }
            let fd = log_abs_det(jac);
            assert!((fd - logdet).abs() < 1e-4, "d={d}: {fd} vs {logdet}");
        }
    }
}

#[test]
fn three_layer_log_prob_expands_termwise() {
    let m = random_model(3, &[6], 3, 21);
    let x = [0.4, -0.9, 1.3];
    let (z, _) = m.inverse(&x).unwrap();
    // −3 log √(2π) − |z|²/2 − Σ log σ, collecting log σ layer by layer
    let mut u = x.to_vec();
    let mut sum_log_sigma = 0.0;
    for layer in &m.layers {
        let g: Vec<f64> = layer.order.iter().map(|&o| u[o]).collect();
        let (mu, ls) = synthflow::made::made_forward(&layer.made, &g).unwrap();
        for (j, &o) in layer.order.iter().enumerate() {
            u[o] = (g[j] - mu[j]) / ls[j].exp();
            sum_log_sigma += ls[j];
        }
    }
    assert!(max_abs_diff(&u, &z) < 1e-12);
    let expected = -3.0 * (2.0 * std::f64::consts::PI).sqrt().ln() - z.iter().map(|v| v * v).sum::<f64>() / 2.0 - sum_log_sigma;
    assert!((m.log_prob(&x).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn identity_flow_density_integrates_to_one() {
    let m = MafModel::identity(2, 1, &[3]).unwrap();
    let k = 481;
    let step = 12.0 / (k - 1) as f64;
    let grid: Vec<f64> = (0..k).map(|i| -6.0 + i as f64 * step).collect();
    let mut pts = Vec::with_capacity(k * k * 2);
    for &a in &grid {
        for &b in &grid {
            pts.extend([a, b]);
        }
    }
    let lp = m.log_prob_batch(&Tensor::matrix(k * k, 2, pts).unwrap()).unwrap();
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let wi = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
            let wj = if j == 0 || j == k - 1 { 0.5 } else { 1.0 };
            total += wi * wj * lp[i * k + j].exp();
        }
    }
    total *= step * step;
    assert!((total - 1.0).abs() < 1e-3, "{total}");
}

#[test]
fn training_gradient_matches_finite_differences() {
    let data = Tensor::from_rows(&[vec![0.3, -0.8], vec![-1.1, 0.5]]).unwrap();
    let m = random_model(2, &[5], 1, 31);
    let (loss, fused) = nll_with_gradients(&m, &data).unwrap();
    let (loss_tape, tape) = nll_with_gradients_tape(&m, &data).unwrap();
    assert!((loss - loss_tape).abs() < 1e-12);
    for (a, b) in fused.iter().zip(&tape) {
        assert!(max_abs_diff(a.data(), b.data()) < 1e-10);
    }

    let h = 1e-5;
    let n_tensors = m.layers[0].made.tensors().len();
    for t in 0..n_tensors {
        for k in 0..m.layers[0].made.tensors()[t].len() {
            let mut plus = m.clone();
            plus.layers[0].made.tensors_mut()[t].data_mut()[k] += h;
            let mut minus = m.clone();
            minus.layers[0].made.tensors_mut()[t].data_mut()[k] -= h;
            let fd = (plus.mean_nll(&data).unwrap() - minus.mean_nll(&data).unwrap()) / (2.0 * h);
            let g = fused[t].data()[k];
            let masked_out = match t {
                0 => m.layers[0].made.masks.hidden[0].data()[k] == 0.0,
                2 | 4 => m.layers[0].made.masks.output.data()[k] == 0.0,
                _ => false,
            };
            if masked_out {
                // the loss reads W ⊙ M, so perturbing a masked entry changes nothing
                assert_eq!(g, 0.0);
                continue;
            }
            let scale = fd.abs().max(g.abs()).max(1e-3);
            assert!((fd - g).abs() / scale < 1e-4, "tensor {t} entry {k}: fd {fd} vs {g}");
        }
    }
}

#[test]
fn fused_and_tape_gradients_agree_on_deep_stacks() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..40 * 4).map(|_| r.random_range(-2.0..2.0)).collect();
    let data = Tensor::matrix(40, 4, data).unwrap();
    let m = random_model(4, &[7, 5], 3, 8);
    let (l1, g1) = nll_with_gradients(&m, &data).unwrap();
    let (l2, g2) = nll_with_gradients_tape(&m, &data).unwrap();
    assert!((l1 - l2).abs() < 1e-12);
    assert_eq!(g1.len(), g2.len());
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(a.shape(), b.shape());
        assert!(max_abs_diff(a.data(), b.data()) < 1e-10);
    }
}

fn gaussian_data(n: usize, d: usize, seed: u64) -> Tensor {
    rng::gaussian_rows(seed, n, d)
}

#[test]
fn training_reduces_loss_and_reaches_gaussian_entropy() {
    let train_x = gaussian_data(2000, 2, 1);
    let held_out = gaussian_data(4000, 2, 2);
    let arch = Architecture {
        hidden_sizes: vec![16],
        n_flows: 2,
    };
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        max_iters: 200,
        seed: 4,
        ..TrainConfig::default()
    };
    let (m, history) = train(&train_x, &arch, &cfg).unwrap();
    assert_eq!(history.train_loss.len(), 200);
    assert!(history.train_loss[199] < history.train_loss[0]);
    let nll = m.mean_nll(&held_out).unwrap();
    let entropy = 1.0 + (2.0 * std::f64::consts::PI).ln();
    assert!((nll - entropy).abs() < 0.1, "held-out NLL {nll} vs {entropy}");
}

#[test]
fn zero_steps_returns_initial_model() {
    let x = gaussian_data(50, 3, 9);
    let arch = Architecture {
        hidden_sizes: vec![6],
        n_flows: 2,
    };
    let cfg = TrainConfig {
        max_iters: 0,
        seed: 12,
        ..TrainConfig::default()
    };
    let (m, history) = train(&x, &arch, &cfg).unwrap();
    assert_eq!(m, MafModel::init(3, &arch, 12).unwrap());
    assert_eq!(history.steps_run, 0);
}

#[test]
fn validation_keeps_best_snapshot_and_stops() {
    let x = gaussian_data(300, 2, 3);
    let arch = Architecture {
        hidden_sizes: vec![8],
        n_flows: 2,
    };
    let cfg = TrainConfig {
        learning_rate: 5e-2,
        max_iters: 2000,
        patience: 20,
        validation_fraction: 0.3,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, history) = train(&x, &arch, &cfg).unwrap();
    assert_eq!(history.val_loss.len(), history.train_loss.len());
    let best = history.val_loss.iter().copied().fold(f64::INFINITY, f64::min);
    assert_eq!(history.val_loss[history.best_step], best);
    if history.stopped_early {
        assert_eq!(history.steps_run, history.best_step + cfg.patience);
    }
}

#[test]
fn training_is_deterministic() {
    let x = gaussian_data(200, 3, 3);
    let arch = Architecture {
        hidden_sizes: vec![8],
        n_flows: 2,
    };
    let cfg = TrainConfig {
        max_iters: 30,
        validation_fraction: 0.2,
        seed: 5,
        ..TrainConfig::default()
    };
    let (a, ha) = train(&x, &arch, &cfg).unwrap();
    let (b, hb) = train(&x, &arch, &cfg).unwrap();
    assert_eq!(write_model(&a), write_model(&b));
    assert_eq!(ha, hb);
}

#[test]
fn training_preconditions() {
    let arch = Architecture {
        hidden_sizes: vec![4],
        n_flows: 1,
    };
    let cfg = TrainConfig::default();
    let few = gaussian_data(5, 3, 1);
    assert!(matches!(train(&few, &arch, &cfg), Err(Error::Input(_))));

    let mut constant = gaussian_data(20, 2, 1);
    for i in 0..20 {
        constant.set(i, 1, 3.0);
    }
    let err = train(&constant, &arch, &cfg).unwrap_err();
    assert!(matches!(err, Error::Degenerate(_)));
    assert!(err.to_string().contains("transform"));

    let bad_lr = TrainConfig {
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert!(train(&gaussian_data(20, 2, 1), &arch, &bad_lr).is_err());
}

#[test]
fn overflowing_loss_reports_step() {
    let mut x = gaussian_data(20, 2, 1);
    x.data_mut().iter_mut().for_each(|v| *v *= 1e200);
    let m = MafModel::identity(2, 1, &[4]).unwrap();
    match train_from(m, &x, &TrainConfig::default()) {
        Err(Error::TrainingDiverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn layer_orders_follow_rotation_and_vary_first_coordinate() {
    assert_eq!(layer_orders(3, 3, 0), vec![vec![0, 1, 2], vec![2, 0, 1], vec![1, 2, 0]]);
    for d in [4, 5, 8] {
        let orders = layer_orders(d, 6, 11);
        for o in &orders {
            let mut s = o.clone();
            s.sort_unstable();
            assert_eq!(s, (0..d).collect::<Vec<_>>());
        }
        for pair in orders.windows(2) {
            assert_ne!(pair[0][0], pair[1][0]);
        }
    }
}

fn model_with_columns() -> MafModel {
    let mut m = random_model(3, &[6, 4], 3, 77);
    m.columns = Some(ModelColumns {
        names: vec!["age".into(), "sbp".into(), "smoker".into()],
        transforms: vec![
            ColumnTransform::Zscore { mean: 52.5, sd: 9.25 },
            ColumnTransform::MinmaxLogit {
                lo: 90.0,
                hi: 180.0,
                padding: 0.01,
            },
            ColumnTransform::DequantizeBinary { threshold: 1.0 },
        ],
    });
    m
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.sfm");
    let m = model_with_columns();
    save(&m, &path).unwrap();
    let back = load(&path).unwrap();
    assert_eq!(back, m);
    let plain = random_model(2, &[3], 2, 1);
    assert_eq!(read_model(&write_model(&plain)).unwrap(), plain);
}

#[test]
fn corrupted_or_foreign_files_are_rejected() {
    let bytes = write_model(&model_with_columns());
    for pos in [9, bytes.len() / 2, bytes.len() - 6] {
        let mut bad = bytes.clone();
        bad[pos] ^= 0x40;
        assert!(matches!(read_model(&bad), Err(Error::Checksum { .. })), "byte {pos}");
    }
    let mut newer = bytes.clone();
    newer[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    assert!(matches!(read_model(&newer), Err(Error::Version { found, .. }) if found == FORMAT_VERSION + 1));
    assert!(read_model(&bytes[..bytes.len() - 10]).is_err());
    assert!(read_model(b"SFMF").is_err());
    assert!(read_model(b"not a model at all").is_err());
}
