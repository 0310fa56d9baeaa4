//! Seed derivation and gaussian sampling.
//!
//! Every stochastic quantity in the crate is drawn from a ChaCha8 stream
//! seeded by a `u64`. Child seeds come from [`derive_seed`], which folds the
//! path components into the parent seed with the splitmix64 finalizer:
//!
//! ```text
//! s = parent
//! for c in path: s = splitmix64(s ^ splitmix64(c + 0x9E3779B97F4A7C15))
//! ```

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(parent: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix64(parent), |s, &c| {
        splitmix64(s ^ splitmix64(c.wrapping_add(0x9E37_79B9_7F4A_7C15)))
    })
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut Rng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        scale * z
    })
}

/// Column-major fill, so a matrix drawn here equals stacking
/// `gaussian_vector` draws column by column.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect();
    DMatrix::from_vec(rows, cols, data)
}
