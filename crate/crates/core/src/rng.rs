//! Seed plumbing.
//!
//! Every random draw in the crate comes from a ChaCha stream addressed by
//! `(seed, stream index)`. Row `i` of any noise matrix always reads stream
//! `i`, so results do not depend on how rows are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::numerics::Tensor;

pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// SplitMix64 finalizer over `(master, index)`; used to give replications,
/// studies and sub-tasks independent seeds.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Standard Gaussian matrix whose row `i` is drawn from `stream(seed, i)`.
pub fn gaussian_rows(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut data = vec![0.0; rows * cols];
    if cols > 0 {
        data.par_chunks_mut(cols).enumerate().for_each(|(i, row)| {
            let mut rng = stream(seed, i as u64);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        });
    }
    Tensor::matrix(rows, cols, data).expect("shape matches by construction")
}
