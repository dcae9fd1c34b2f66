//! Masked autoencoder blocks.
//!
//! Units carry integer degrees. Inputs have degrees `1..=d`; hidden units
//! cycle through `1..=d-1`. A hidden unit of degree `k` may read inputs
//! `1..=k`, and output coordinate `i` may read hidden units of degree `< i`,
//! so output `i` depends on inputs `1..i` only.
//!
//! Weight matrices are stored `[fan_in × fan_out]` so a batch `X` (rows are
//! observations) maps to `X · W + b`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{GradTape, NodeId, Tensor};

/// Bounds applied to the log-scale head wherever it is used.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    /// Degrees per layer: inputs first, then each hidden layer.
    pub degrees: Vec<Vec<usize>>,
    /// One mask per hidden weight matrix, shaped like it.
    pub hidden: Vec<Tensor>,
    /// Mask shared by the μ and log σ heads, `[last_width × d]`.
    pub output: Tensor,
}

impl MaskSet {
    pub fn input_dim(&self) -> usize {
        self.degrees[0].len()
    }

    /// Boolean product of all masks: entry `[j][i]` is true when output `i`
    /// has any path from input `j`.
    pub fn connectivity(&self) -> Vec<Vec<bool>> {
        let d = self.input_dim();
        let mut reach: Vec<Vec<bool>> = (0..d).map(|j| (0..d).map(|k| j == k).collect()).collect();
        for mask in self.hidden.iter().chain(std::iter::once(&self.output)) {
            let (rows, cols) = (mask.rows(), mask.cols());
            reach = reach
                .iter()
                .map(|r| {
                    (0..cols)
                        .map(|c| (0..rows).any(|k| r[k] && mask.at(k, c) != 0.0))
                        .collect()
                })
                .collect();
        }
        reach
    }
}

/// Builds masks for a `d`-dimensional block with the given hidden widths.
///
/// Hidden degrees cycle `1, 2, …, d-1, 1, 2, …`; `seed` only shifts where the
/// cycle starts, so `seed = 0` gives the plain cycle.
pub fn build_masks(d: usize, hidden_sizes: &[usize], seed: u64) -> Result<MaskSet> {
    if d == 0 {
        return Err(Error::Contract("MADE input dimension must be at least 1".into()));
    }
    if let Some(pos) = hidden_sizes.iter().position(|&h| h == 0) {
        return Err(Error::Contract(format!("hidden layer {pos} has zero width")));
    }
    let mut degrees = vec![(1..=d).collect::<Vec<_>>()];
    for &width in hidden_sizes {
        let layer = if d == 1 {
            // nothing to condition on: hidden units get degree 0 and no inputs
            vec![0; width]
        } else {
            let span = (d - 1) as u64;
            (0..width as u64)
                .map(|h| ((h + seed) % span) as usize + 1)
                .collect()
        };
        degrees.push(layer);
    }

    let mut hidden = Vec::with_capacity(hidden_sizes.len());
    for pair in degrees.windows(2) {
        let (src, dst) = (&pair[0], &pair[1]);
        let data = src
            .iter()
            .flat_map(|&s| dst.iter().map(move |&t| if t >= s && s > 0 { 1.0 } else { 0.0 }))
            .collect();
        hidden.push(Tensor::matrix(src.len(), dst.len(), data)?);
    }

    let last = degrees.last().expect("input degrees always present");
    let data = last
        .iter()
        .flat_map(|&s| (1..=d).map(move |i| if i > s { 1.0 } else { 0.0 }))
        .collect();
    let output = Tensor::matrix(last.len(), d, data)?;

    Ok(MaskSet {
        degrees,
        hidden,
        output,
    })
}

/// Trainable parameters of one block, plus the masks they live under.
///
/// Weights are kept zero outside their masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MadeParams {
    pub masks: MaskSet,
    pub mask_seed: u64,
    pub hidden_weights: Vec<Tensor>,
    pub hidden_biases: Vec<Tensor>,
    pub mu_weight: Tensor,
    pub mu_bias: Tensor,
    pub log_sigma_weight: Tensor,
    pub log_sigma_bias: Tensor,
}

impl MadeParams {
    /// All-zero parameters: μ = 0 and σ = 1 everywhere.
    pub fn zeros(d: usize, hidden_sizes: &[usize], mask_seed: u64) -> Result<Self> {
        let masks = build_masks(d, hidden_sizes, mask_seed)?;
        let hidden_weights: Vec<Tensor> = masks
            .hidden
            .iter()
            .map(|m| Tensor::zeros(m.shape().to_vec()))
            .collect();
        let hidden_biases = hidden_sizes.iter().map(|&h| Tensor::zeros(vec![1, h])).collect();
        let last = masks.output.rows();
        Ok(MadeParams {
            mu_weight: Tensor::zeros(vec![last, d]),
            mu_bias: Tensor::zeros(vec![1, d]),
            log_sigma_weight: Tensor::zeros(vec![last, d]),
            log_sigma_bias: Tensor::zeros(vec![1, d]),
            masks,
            mask_seed,
            hidden_weights,
            hidden_biases,
        })
    }

    /// Uniform(−s, s) weights with s = 1/√fan_in, masked, then spectrally
    /// normalized once. Biases start at zero.
    pub fn init(d: usize, hidden_sizes: &[usize], mask_seed: u64, rng: &mut impl Rng) -> Result<Self> {
        let mut params = MadeParams::zeros(d, hidden_sizes, mask_seed)?;
        let masks = params.masks.clone();
        for (w, m) in params.hidden_weights.iter_mut().zip(&masks.hidden) {
            fill_uniform(w, m, rng);
        }
        fill_uniform(&mut params.mu_weight, &masks.output, rng);
        fill_uniform(&mut params.log_sigma_weight, &masks.output, rng);
        let seed = rng.random();
        params.spectral_normalize_all(20, seed);
        Ok(params)
    }

    pub fn d(&self) -> usize {
        self.masks.input_dim()
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.hidden_biases.iter().map(Tensor::cols).collect()
    }

    /// Parameters in a fixed order: (W, b) per hidden layer, then μ head, then log σ head.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden_weights.len() + 4);
        for (w, b) in self.hidden_weights.iter().zip(&self.hidden_biases) {
            out.push(w);
            out.push(b);
        }
        out.extend([&self.mu_weight, &self.mu_bias, &self.log_sigma_weight, &self.log_sigma_bias]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::with_capacity(2 * self.hidden_weights.len() + 4);
        for (w, b) in self.hidden_weights.iter_mut().zip(self.hidden_biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out.extend([
            &mut self.mu_weight,
            &mut self.mu_bias,
            &mut self.log_sigma_weight,
            &mut self.log_sigma_bias,
        ]);
        out
    }

    /// The weight matrices subject to spectral normalization, paired with masks.
    pub fn weight_matrices_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.hidden_weights.iter_mut().collect();
        out.push(&mut self.mu_weight);
        out.push(&mut self.log_sigma_weight);
        out
    }

    pub fn spectral_normalize_all(&mut self, iters: usize, seed: u64) {
        for (k, w) in self.weight_matrices_mut().into_iter().enumerate() {
            *w = spectral_normalize(w, iters, seed.wrapping_add(k as u64));
        }
    }

    /// Batched evaluation: rows of `x` are observations; returns (μ, clamped log σ).
    pub fn forward_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if !x.is_matrix() || x.cols() != self.d() {
            return Err(Error::Dimension {
                op: "made_forward",
                left: x.shape().to_vec(),
                right: vec![self.d()],
            });
        }
        let n = x.rows();
        let mut h = x.clone();
        for (w, b) in self.hidden_weights.iter().zip(&self.hidden_biases) {
            h = affine(&h, w, b, n)?;
            h.data_mut().iter_mut().for_each(|v| *v = crate::numerics::tanh(*v));
        }
        let mu = affine(&h, &self.mu_weight, &self.mu_bias, n)?;
        let mut log_sigma = affine(&h, &self.log_sigma_weight, &self.log_sigma_bias, n)?;
        log_sigma
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX));
        if !mu.all_finite() || !log_sigma.all_finite() {
            return Err(Error::NonFinite("made_forward output".into()));
        }
        Ok((mu, log_sigma))
    }

    /// Records the block on a tape with its parameters as trainable leaves.
    pub fn record(&self, tape: &mut GradTape) -> MadeNodes {
        let params = self.tensors().into_iter().map(|t| tape.parameter(t.clone())).collect();
        let hidden_masks = self.masks.hidden.iter().map(|m| tape.constant(m.clone())).collect();
        let output_mask = tape.constant(self.masks.output.clone());
        MadeNodes {
            params,
            hidden_masks,
            output_mask,
        }
    }
}

/// Evaluates one observation; mirrors [`MadeParams::forward_batch`].
pub fn made_forward(params: &MadeParams, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("made_forward input ({bad})")));
    }
    let row = Tensor::matrix(1, x.len(), x.to_vec())?;
    let (mu, log_sigma) = params.forward_batch(&row)?;
    Ok((mu.into_data(), log_sigma.into_data()))
}

/// Tape handles for one recorded block.
#[derive(Debug, Clone)]
pub struct MadeNodes {
    /// Same order as [`MadeParams::tensors`].
    pub params: Vec<NodeId>,
    hidden_masks: Vec<NodeId>,
    output_mask: NodeId,
}

impl MadeNodes {
    /// Evaluates the block on a batch node; returns (μ, clamped log σ) nodes.
    pub fn forward(&self, tape: &mut GradTape, x: NodeId, ones: NodeId) -> Result<(NodeId, NodeId)> {
        let layers = self.hidden_masks.len();
        let mut h = x;
        for l in 0..layers {
            let (w, b) = (self.params[2 * l], self.params[2 * l + 1]);
            let masked = tape.mul(w, self.hidden_masks[l])?;
            let pre = tape_affine(tape, h, masked, b, ones)?;
            h = tape.tanh(pre);
        }
        let base = 2 * layers;
        let mu_w = tape.mul(self.params[base], self.output_mask)?;
        let mu = tape_affine(tape, h, mu_w, self.params[base + 1], ones)?;
        let ls_w = tape.mul(self.params[base + 2], self.output_mask)?;
        let ls = tape_affine(tape, h, ls_w, self.params[base + 3], ones)?;
        let ls = tape.clamp(ls, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
        Ok((mu, ls))
    }
}

fn tape_affine(tape: &mut GradTape, x: NodeId, w: NodeId, b: NodeId, ones: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    // bias broadcast over rows as ones[n×1] · b[1×h]
    let bias = tape.matmul(ones, b)?;
    tape.add(xw, bias)
}

fn affine(x: &Tensor, w: &Tensor, b: &Tensor, n: usize) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    let width = out.cols();
    let bias = b.data();
    for i in 0..n {
        for (o, bj) in out.data_mut()[i * width..(i + 1) * width].iter_mut().zip(bias) {
            *o += bj;
        }
    }
    Ok(out)
}

fn fill_uniform(w: &mut Tensor, mask: &Tensor, rng: &mut impl Rng) {
    let scale = 1.0 / (w.rows() as f64).sqrt();
    for (v, m) in w.data_mut().iter_mut().zip(mask.data()) {
        let draw: f64 = rng.random_range(-scale..scale);
        *v = if *m != 0.0 { draw } else { 0.0 };
    }
}

/// Power-iteration estimate of the largest singular value, refining the
/// right singular vector estimate `v` in place. `v.len()` must equal `w.cols()`.
pub fn power_iteration(w: &Tensor, v: &mut [f64], iters: usize) -> f64 {
    let (rows, cols) = (w.rows(), w.cols());
    let mut u = vec![0.0; rows];
    let mut sigma = 0.0;
    for _ in 0..iters.max(1) {
        // u = W v / |W v|
        for (i, ui) in u.iter_mut().enumerate() {
            *ui = w.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        }
        let norm_u = l2(&u);
        if norm_u == 0.0 {
            return 0.0;
        }
        u.iter_mut().for_each(|x| *x /= norm_u);
        // v = Wᵀ u / |Wᵀ u|
        v.iter_mut().for_each(|x| *x = 0.0);
        for (i, &ui) in u.iter().enumerate() {
            for (vj, &wij) in v.iter_mut().zip(w.row(i)) {
                *vj += wij * ui;
            }
        }
        let norm_v = l2(v);
        if norm_v == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm_v);
        sigma = norm_v;
    }
    debug_assert_eq!(v.len(), cols);
    sigma
}

/// Divides `w` by its power-iteration spectral norm estimate.
///
/// Runs at least `iters` iterations, then keeps iterating (up to a cap) until
/// the estimate stops moving, so nearly-degenerate top singular values still
/// converge. An all-zero matrix is returned unchanged.
pub fn spectral_normalize(w: &Tensor, iters: usize, seed: u64) -> Tensor {
    const MAX_EXTRA_ROUNDS: usize = 200;
    if w.data().iter().all(|&x| x == 0.0) {
        return w.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..w.cols()).map(|_| rng.sample(StandardNormal)).collect();
    let mut sigma = power_iteration(w, &mut v, iters);
    for _ in 0..MAX_EXTRA_ROUNDS {
        let next = power_iteration(w, &mut v, 10);
        let settled = (next - sigma).abs() <= 1e-13 * next;
        sigma = next;
        if settled {
            break;
        }
    }
    if sigma > 0.0 {
        w.scale(1.0 / sigma)
    } else {
        w.clone()
    }
}

fn l2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
