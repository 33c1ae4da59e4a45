//! Named, keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream derived from a
//! root seed plus a tuple of integer keys, so that any sub-computation can be
//! replayed in isolation (for example a single robot's sampler noise at a
//! single timestep).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::Scalar;

/// Well-known stream purposes. Keeping them in one place avoids accidental
/// reuse of a stream for two unrelated draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Field = 1,
    InitialPositions = 2,
    Prior = 3,
    SamplerNoise = 4,
    RandomPolicy = 5,
    DatasetRows = 6,
    Shuffle = 7,
    LossNoise = 8,
    Init = 9,
    Validation = 10,
    Rollout = 11,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed and a list of keys into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, stream: Stream, keys: &[u64]) -> u64 {
    let mut h = splitmix(seed ^ splitmix(stream as u64));
    for &k in keys {
        h = splitmix(h ^ k.wrapping_mul(0xA24B_AED4_963E_E407));
    }
    h
}

pub fn keyed_rng(seed: u64, stream: Stream, keys: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, keys))
}

pub fn standard_normal<S: Scalar, R: rand::Rng + ?Sized>(rng: &mut R) -> S {
    let v: f64 = StandardNormal.sample(rng);
    S::of(v)
}

pub fn normal_vec<S: Scalar, R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<S> {
    (0..n).map(|_| standard_normal(rng)).collect()
}
