use synthflow::made::MadeParams;
use synthflow::maf::{Architecture, FlowLayer, MafModel};
use synthflow::numerics::Tensor;
use synthflow::synth::{
    direct_noise_inject, direct_noise_inject_with, flow_sample, latent_noise_inject, latent_noise_inject_with,
    synthesize, Mechanism, NoiseBank, SynthesisSpec,
};
use synthflow::{rng, Error};

fn affine_model(c: f64, s: f64) -> MafModel {
    let mut made = MadeParams::zeros(1, &[4], 0).unwrap();
    made.mu_bias.data_mut()[0] = c;
    made.log_sigma_bias.data_mut()[0] = s.ln();
    MafModel::new(vec![FlowLayer { order: vec![0], made }]).unwrap()
}

fn random_model(d: usize, seed: u64) -> MafModel {
    let arch = Architecture {
        hidden_sizes: vec![8],
        n_flows: 3,
    };
    let mut m = MafModel::init(d, &arch, seed).unwrap();
    for (k, layer) in m.layers.iter_mut().enumerate() {
        layer
            .made
            .mu_bias
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(j, v)| *v = 0.3 * ((k + j) as f64).sin());
        layer
            .made
            .log_sigma_bias
            .data_mut()
            .iter_mut()
            .enumerate()
            .for_each(|(j, v)| *v = 0.2 * ((k * 3 + j) as f64).cos());
    }
    m
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    (0..t.rows()).map(|i| t.at(i, j)).collect()
}

fn bivariate(n: usize, rho: f64, seed: u64) -> Tensor {
    let z = rng::gaussian_rows(seed, n, 2);
    let c = (1.0 - rho * rho).sqrt();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| vec![z.at(i, 0), rho * z.at(i, 0) + c * z.at(i, 1)])
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn w_one_reproduces_input_exactly() {
    let m = random_model(3, 4);
    let x = rng::gaussian_rows(11, 50, 3);
    let out = latent_noise_inject(&m, &x, 1.0, 99).unwrap();
    assert_eq!(out, x);
    let direct = direct_noise_inject(&x, 1.0, 99).unwrap();
    assert_eq!(direct, x);
}

#[test]
fn identity_flow_at_w_zero_returns_the_noise() {
    let m = MafModel::identity(3, 2, &[6]).unwrap();
    let x = rng::gaussian_rows(1, 40, 3);
    let bank = NoiseBank::new(7, 40, 3);
    let out = latent_noise_inject_with(&m, &x, 0.0, &bank).unwrap();
    assert!(max_abs_diff(out.data(), bank.z().data()) < 1e-14);
}

#[test]
fn affine_flow_matches_closed_form() {
    let (c, s, w) = (1.5, 2.0, 0.75);
    let m = affine_model(c, s);
    let x = Tensor::matrix(4, 1, vec![-1.0, 0.0, 2.5, 7.0]).unwrap();
    let bank = NoiseBank::from_tensor(Tensor::matrix(4, 1, vec![0.3, -1.2, 0.0, 2.0]).unwrap());
    let out = latent_noise_inject_with(&m, &x, w, &bank).unwrap();
    for i in 0..4 {
        let u = (x.at(i, 0) - c) / s;
        let expect = c + s * (w.sqrt() * u + (1.0 - w).sqrt() * bank.z().at(i, 0));
        assert!((out.at(i, 0) - expect).abs() < 1e-12, "row {i}");
    }
}

#[test]
fn rows_follow_their_inputs_under_permutation() {
    let m = random_model(3, 5);
    let x = rng::gaussian_rows(2, 30, 3);
    let bank = NoiseBank::new(8, 30, 3);
    let perm: Vec<usize> = (0..30).map(|i| (i * 7 + 3) % 30).collect();
    let xp = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
    let base = latent_noise_inject_with(&m, &x, 0.6, &bank).unwrap();
    let permuted = latent_noise_inject_with(&m, &xp, 0.6, &bank.permuted(&perm)).unwrap();
    for (k, &p) in perm.iter().enumerate() {
        assert!(max_abs_diff(permuted.row(k), base.row(p)) < 1e-12);
    }
}

#[test]
fn seeded_outputs_are_deterministic() {
    let m = random_model(2, 6);
    let x = rng::gaussian_rows(3, 25, 2);
    for mech in [Mechanism::LatentNoise, Mechanism::FlowSample, Mechanism::DirectNoise] {
        let spec = SynthesisSpec {
            mechanism: mech,
            w: 0.4,
            seed: 17,
            m: Some(25),
        };
        let a = synthesize(Some(&m), &x, &spec).unwrap();
        let b = synthesize(Some(&m), &x, &spec).unwrap();
        assert_eq!(a, b, "{}", mech.name());
        let other = synthesize(Some(&m), &x, &SynthesisSpec { seed: 18, ..spec }).unwrap();
        assert_ne!(a, other, "{}", mech.name());
    }
}

#[test]
fn distance_to_input_shrinks_as_w_grows() {
    let m = random_model(3, 9);
    let x = rng::gaussian_rows(4, 400, 3);
    let bank = NoiseBank::new(12, 400, 3);
    let mut last = f64::INFINITY;
    for w in [0.0, 0.25, 0.5, 0.75, 0.9, 0.99] {
        let out = latent_noise_inject_with(&m, &x, w, &bank).unwrap();
        let dist: f64 = (0..400)
            .map(|i| {
                x.row(i)
                    .iter()
                    .zip(out.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum::<f64>()
            / 400.0;
        assert!(dist < last, "w = {w}: {dist} vs {last}");
        last = dist;
    }
}

#[test]
fn direct_noise_shrinks_correlation_by_w() {
    let x = bivariate(20_000, 0.9, 21);
    let data_rho = pearson(&column(&x, 0), &column(&x, 1));
    for w in [0.25, 0.5, 0.75] {
        let out = direct_noise_inject(&x, w, 22).unwrap();
        let rho = pearson(&column(&out, 0), &column(&out, 1));
        assert!((rho - w * data_rho).abs() < 0.01, "w = {w}: {rho} vs {}", w * data_rho);
    }
}

#[test]
fn identity_flow_latent_noise_scales_correlation() {
    // through an identity flow the latent mechanism reduces to direct noise: ρ → w·ρ
    let m = MafModel::identity(2, 2, &[4]).unwrap();
    let x = bivariate(20_000, 0.9, 31);
    let out = latent_noise_inject(&m, &x, 0.5, 32).unwrap();
    let rho = pearson(&column(&out, 0), &column(&out, 1));
    assert!((rho - 0.45).abs() < 0.02, "{rho}");
}

#[test]
fn direct_noise_rejects_constant_column() {
    let x = Tensor::from_rows(&[vec![1.0, 3.0], vec![2.0, 3.0], vec![4.0, 3.0]]).unwrap();
    assert!(matches!(direct_noise_inject(&x, 0.5, 1), Err(Error::Degenerate(_))));
}

#[test]
fn preconditions() {
    let m = random_model(2, 1);
    let x = rng::gaussian_rows(3, 10, 2);
    assert!(matches!(latent_noise_inject(&m, &x, 1.5, 0), Err(Error::Contract(_))));
    assert!(matches!(latent_noise_inject(&m, &x, -0.1, 0), Err(Error::Contract(_))));
    let wide = rng::gaussian_rows(3, 10, 3);
    assert!(matches!(latent_noise_inject(&m, &wide, 0.5, 0), Err(Error::Dimension { .. })));
    let short = NoiseBank::new(0, 9, 2);
    assert!(latent_noise_inject_with(&m, &x, 0.5, &short).is_err());
    assert!(direct_noise_inject_with(&x, 0.5, &short).is_err());
    let spec = SynthesisSpec {
        mechanism: Mechanism::LatentNoise,
        w: 0.5,
        seed: 0,
        m: None,
    };
    assert!(matches!(synthesize(None, &x, &spec), Err(Error::Contract(_))));
    let fs = SynthesisSpec {
        mechanism: Mechanism::FlowSample,
        ..spec
    };
    assert!(matches!(synthesize(Some(&m), &x, &fs), Err(Error::Contract(_))));
    assert_eq!(flow_sample(&m, 7, 3).unwrap().shape(), &[7, 2]);
}

#[test]
fn mechanism_names_round_trip() {
    for mech in [Mechanism::LatentNoise, Mechanism::FlowSample, Mechanism::DirectNoise] {
        assert_eq!(Mechanism::parse(mech.name()).unwrap(), mech);
        let json = serde_json::to_string(&mech).unwrap();
        assert_eq!(json, format!("\"{}\"", mech.name()));
    }
    assert!(Mechanism::parse("gan").is_err());
}
