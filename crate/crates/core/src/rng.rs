//! Seeded random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::tensor::Mat;

/// The reference generator used for every seeded stream in the crate.
pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stable 64-bit FNV-1a hash, used to derive per-record seeds from ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Combine a base seed with arbitrary tags into an independent stream seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut bytes = Vec::with_capacity(8 * (tags.len() + 1));
    bytes.extend_from_slice(&base.to_le_bytes());
    for t in tags {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fnv1a(&bytes)
}

/// Matrix of i.i.d. standard normal draws, filled row-major.
pub fn standard_normal<S: Scalar>(rows: usize, cols: usize, rng: &mut SeededRng) -> Mat<S> {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z)
    })
}
