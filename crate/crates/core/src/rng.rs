//! Seed derivation. Every random draw in a run comes from a generator keyed
//! by `(run seed, purpose, indices)`, so resuming any stage from a checkpoint
//! reproduces the uninterrupted run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, purpose: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in purpose.bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &i in indices {
        h = splitmix(h ^ i.wrapping_mul(0x2545_F491_4F6C_DD1D));
    }
    h
}

pub fn rng_for(seed: u64, purpose: &str, indices: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, indices))
}

/// `n` i.i.d. draws from `N(0, std²)`.
pub fn gaussian_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    if std == 0.0 {
        return vec![0.0; n];
    }
    let dist = Normal::new(0.0, std).expect("finite positive std");
    (0..n).map(|_| dist.sample(rng)).collect()
}
