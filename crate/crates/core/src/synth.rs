//! Seeded synthetic token generators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index so trials get independent streams.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_matrix<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// `n x d` i.i.d. normal tokens with standard deviation `scale`.
pub fn gaussian_tokens(n: usize, d: usize, scale: f64, seed: u64) -> DMatrix<f64> {
    normal_matrix(n, d, scale, &mut rng(seed))
}

/// Tokens drawn around `clusters` random centres.
///
/// Centres are normal with standard deviation `separation`; each token is its
/// centre plus normal noise with standard deviation `spread`. Tokens are
/// assigned to clusters round-robin so every cluster has `n / clusters` members
/// (up to one).
pub fn clustered_tokens(n: usize, d: usize, clusters: usize, spread: f64, separation: f64, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let clusters = clusters.max(1);
    let centres = normal_matrix(clusters, d, separation, &mut r);
    let noise = normal_matrix(n, d, spread, &mut r);
    DMatrix::from_fn(n, d, |i, j| centres[(i % clusters, j)] + noise[(i, j)])
}

/// Uniform in `[-bound, bound]`.
pub fn uniform_matrix<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}
