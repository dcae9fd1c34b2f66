//! Hand-derived NLL gradient for the whole stack.
//!
//! Computes the same quantity as the tape-based reference, without building
//! a graph: one forward sweep keeping per-layer activations, then one reverse
//! sweep. The tape version is the oracle for this one in tests.

use super::{MafModel, HALF_LOG_2PI};
use crate::error::{Error, Result};
use crate::made::{MadeParams, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::numerics::{exp, gemm, tanh, MatRef, Tensor};

#[derive(Default)]
struct LayerCache {
    /// Gathered layer input `u[:, order]`.
    gathered: Vec<f64>,
    /// Hidden activations after tanh, one per hidden layer.
    hidden: Vec<Vec<f64>>,
    /// Unclamped log σ pre-activation.
    log_sigma_raw: Vec<f64>,
    /// Gathered layer output `z'`.
    z: Vec<f64>,
    /// `exp(−clamp(log σ))`.
    inv_sigma: Vec<f64>,
}

/// Batch-sized scratch buffers, kept across training steps so the large
/// allocations are not returned to the OS and faulted back in every step.
#[derive(Default)]
pub(crate) struct Workspace {
    caches: Vec<LayerCache>,
    u: Vec<f64>,
    o: Vec<f64>,
    gz: Vec<f64>,
    g_gathered: Vec<f64>,
    go: Vec<f64>,
    g_h: Vec<f64>,
    ga: Vec<f64>,
    next: Vec<f64>,
}

/// Sizes a scratch buffer without clearing it; every user overwrites all of it.
fn fit_len(buf: &mut Vec<f64>, len: usize) {
    buf.resize(len, 0.0);
}

/// Masked weights of one block, with the μ and log σ heads side by side.
struct Dense {
    hidden: Vec<Vec<f64>>,
    /// `h_last × 2d`: columns `0..d` are μ, `d..2d` are log σ.
    out: Vec<f64>,
    out_bias: Vec<f64>,
}

fn masked(w: &Tensor, m: &Tensor) -> Vec<f64> {
    w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect()
}

fn dense(made: &MadeParams) -> Dense {
    let d = made.d();
    let h = made.masks.output.rows();
    let mu = masked(&made.mu_weight, &made.masks.output);
    let ls = masked(&made.log_sigma_weight, &made.masks.output);
    let mut out = vec![0.0; h * 2 * d];
    for r in 0..h {
        out[r * 2 * d..r * 2 * d + d].copy_from_slice(&mu[r * d..(r + 1) * d]);
        out[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(&ls[r * d..(r + 1) * d]);
    }
    let mut out_bias = made.mu_bias.data().to_vec();
    out_bias.extend_from_slice(made.log_sigma_bias.data());
    Dense {
        hidden: made
            .hidden_weights
            .iter()
            .zip(&made.masks.hidden)
            .map(|(w, m)| masked(w, m))
            .collect(),
        out,
        out_bias,
    }
}

fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
    }
}

fn col_sums(x: &[f64], cols: usize) -> Vec<f64> {
    let mut s = vec![0.0; cols];
    for row in x.chunks_exact(cols) {
        s.iter_mut().zip(row).for_each(|(a, v)| *a += v);
    }
    s
}

/// Mean NLL and gradients, in the same layout as [`super::nll_with_gradients_tape`].
pub fn nll_with_gradients(model: &MafModel, data: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    nll_with_gradients_in(model, data, &mut Workspace::default())
}

pub(crate) fn nll_with_gradients_in(model: &MafModel, data: &Tensor, ws: &mut Workspace) -> Result<(f64, Vec<Tensor>)> {
    model.check_batch(data, "nll_with_gradients")?;
    let (n, d) = (data.rows(), data.cols());
    let inv_n = 1.0 / n as f64;
    let weights: Vec<Dense> = model.layers.iter().map(|l| dense(&l.made)).collect();
    ws.caches.resize_with(model.layers.len(), LayerCache::default);

    // forward sweep
    ws.u.clear();
    ws.u.extend_from_slice(data.data());
    let mut log_sigma_sum = 0.0;
    for ((layer, w), cache) in model.layers.iter().zip(&weights).zip(ws.caches.iter_mut()) {
        let order = &layer.order;
        fit_len(&mut cache.gathered, n * d);
        for (g, src) in cache.gathered.chunks_exact_mut(d).zip(ws.u.chunks_exact(d)) {
            for (j, &o) in order.iter().enumerate() {
                g[j] = src[o];
            }
        }
        cache.hidden.resize_with(w.hidden.len(), Vec::new);
        let mut prev_width = d;
        for (l, (wl, b)) in w.hidden.iter().zip(&layer.made.hidden_biases).enumerate() {
            let width = b.cols();
            let (before, rest) = cache.hidden.split_at_mut(l);
            let a = &mut rest[0];
            let prev: &[f64] = if l == 0 { &cache.gathered } else { &before[l - 1] };
            fit_len(a, n * width);
            gemm(n, prev_width, width, MatRef::row_major(prev, prev_width), MatRef::row_major(wl, width), a, false);
            add_bias(a, b.data());
            a.iter_mut().for_each(|v| *v = tanh(*v));
            prev_width = width;
        }
        let last: &[f64] = cache.hidden.last().map(Vec::as_slice).unwrap_or(&cache.gathered);
        fit_len(&mut ws.o, n * 2 * d);
        gemm(n, prev_width, 2 * d, MatRef::row_major(last, prev_width), MatRef::row_major(&w.out, 2 * d), &mut ws.o, false);
        add_bias(&mut ws.o, &w.out_bias);

        fit_len(&mut cache.log_sigma_raw, n * d);
        fit_len(&mut cache.z, n * d);
        fit_len(&mut cache.inv_sigma, n * d);
        for i in 0..n {
            let orow = &ws.o[i * 2 * d..(i + 1) * 2 * d];
            for j in 0..d {
                let k = i * d + j;
                let ls = orow[d + j].clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX);
                cache.log_sigma_raw[k] = orow[d + j];
                log_sigma_sum += ls;
                cache.inv_sigma[k] = exp(-ls);
                cache.z[k] = (cache.gathered[k] - orow[j]) * cache.inv_sigma[k];
            }
        }
        for (dst, src) in ws.u.chunks_exact_mut(d).zip(cache.z.chunks_exact(d)) {
            for (j, &o) in order.iter().enumerate() {
                dst[o] = src[j];
            }
        }
    }
    let sq: f64 = ws.u.iter().map(|v| v * v).sum();
    let loss = inv_n * (0.5 * sq + log_sigma_sum) + d as f64 * HALF_LOG_2PI;
    if !loss.is_finite() {
        return Ok((loss, Vec::new()));
    }

    // reverse sweep; `ws.u` now holds d(loss)/d(layer output) in data coordinates
    ws.u.iter_mut().for_each(|v| *v *= inv_n);
    let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(model.layers.len());
    for ((layer, w), cache) in model.layers.iter().zip(&weights).zip(&ws.caches).rev() {
        let made = &layer.made;
        let order = &layer.order;
        fit_len(&mut ws.gz, n * d);
        for (g, src) in ws.gz.chunks_exact_mut(d).zip(ws.u.chunks_exact(d)) {
            for (j, &o) in order.iter().enumerate() {
                g[j] = src[o];
            }
        }
        fit_len(&mut ws.g_gathered, n * d);
        fit_len(&mut ws.go, n * 2 * d);
        for i in 0..n {
            for j in 0..d {
                let k = i * d + j;
                let gzk = ws.gz[k] * cache.inv_sigma[k];
                ws.g_gathered[k] = gzk;
                ws.go[i * 2 * d + j] = -gzk;
                let raw = cache.log_sigma_raw[k];
                ws.go[i * 2 * d + d + j] = if (LOG_SIGMA_MIN..=LOG_SIGMA_MAX).contains(&raw) {
                    inv_n - ws.gz[k] * cache.z[k]
                } else {
                    0.0
                };
            }
        }

        let last: &[f64] = cache.hidden.last().map(Vec::as_slice).unwrap_or(&cache.gathered);
        let h_last = made.masks.output.rows();
        let mut g_out = vec![0.0; h_last * 2 * d];
        gemm(h_last, n, 2 * d, MatRef::transposed(last, h_last), MatRef::row_major(&ws.go, 2 * d), &mut g_out, false);
        let g_out_bias = col_sums(&ws.go, 2 * d);
        // g_h and next trade places per hidden layer; sizing both for the
        // widest layer keeps them from being regrown (and zero-filled) each time
        let widest = made.hidden_sizes().into_iter().fold(d, usize::max);
        fit_len(&mut ws.g_h, n * widest);
        fit_len(&mut ws.next, n * widest);
        gemm(
            n,
            2 * d,
            h_last,
            MatRef::row_major(&ws.go, 2 * d),
            MatRef::transposed(&w.out, 2 * d),
            &mut ws.g_h[..n * h_last],
            false,
        );

        let layers = made.hidden_weights.len();
        let mut g_hidden_w = vec![Vec::new(); layers];
        let mut g_hidden_b = vec![Vec::new(); layers];
        let mut width = h_last;
        for l in (0..layers).rev() {
            let act = &cache.hidden[l];
            fit_len(&mut ws.ga, n * width);
            for ((a, g), y) in ws.ga.iter_mut().zip(&ws.g_h).zip(act) {
                *a = g * (1.0 - y * y);
            }
            let (prev, prev_width): (&[f64], usize) = if l == 0 {
                (&cache.gathered, d)
            } else {
                (&cache.hidden[l - 1], made.hidden_biases[l - 1].cols())
            };
            let mut gw = vec![0.0; prev_width * width];
            gemm(prev_width, n, width, MatRef::transposed(prev, prev_width), MatRef::row_major(&ws.ga, width), &mut gw, false);
            gw.iter_mut().zip(made.masks.hidden[l].data()).for_each(|(g, m)| *g *= m);
            g_hidden_b[l] = col_sums(&ws.ga, width);
            g_hidden_w[l] = gw;
            gemm(
                n,
                width,
                prev_width,
                MatRef::row_major(&ws.ga, width),
                MatRef::transposed(&w.hidden[l], width),
                &mut ws.next[..n * prev_width],
                false,
            );
            std::mem::swap(&mut ws.g_h, &mut ws.next);
            width = prev_width;
        }
        // with no hidden layers g_h already refers to the gathered input
        ws.g_gathered.iter_mut().zip(&ws.g_h).for_each(|(a, b)| *a += b);

        for (dst, src) in ws.u.chunks_exact_mut(d).zip(ws.g_gathered.chunks_exact(d)) {
            for (j, &o) in order.iter().enumerate() {
                dst[o] = src[j];
            }
        }

        let out_mask = made.masks.output.data();
        let mut g_mu = vec![0.0; h_last * d];
        let mut g_ls = vec![0.0; h_last * d];
        for r in 0..h_last {
            for j in 0..d {
                g_mu[r * d + j] = g_out[r * 2 * d + j] * out_mask[r * d + j];
                g_ls[r * d + j] = g_out[r * 2 * d + d + j] * out_mask[r * d + j];
            }
        }
        let mut tensors = Vec::with_capacity(2 * layers + 4);
        for l in 0..layers {
            let shape = made.hidden_weights[l].shape().to_vec();
            tensors.push(Tensor::new(shape, std::mem::take(&mut g_hidden_w[l]))?);
            tensors.push(Tensor::matrix(1, made.hidden_biases[l].cols(), std::mem::take(&mut g_hidden_b[l]))?);
        }
        tensors.push(Tensor::matrix(h_last, d, g_mu)?);
        tensors.push(Tensor::matrix(1, d, g_out_bias[..d].to_vec())?);
        tensors.push(Tensor::matrix(h_last, d, g_ls)?);
        tensors.push(Tensor::matrix(1, d, g_out_bias[d..].to_vec())?);
        per_layer.push(tensors);
    }
    per_layer.reverse();
    let grads: Vec<Tensor> = per_layer.into_iter().flatten().collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::NonFinite("training gradient".into()));
    }
    Ok((loss, grads))
}
