//! Counter-based seeding: every logical stream (bin, sample, condition) gets
//! its own generator keyed by `seed ⊕ splitmix64(key)`, so parallel work is
//! reproducible regardless of scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator for the stream identified by the pair `(a, b)`.
pub fn stream(seed: u64, a: usize, b: usize) -> ChaCha8Rng {
    let key = ((a as u64) << 32) ^ b as u64;
    ChaCha8Rng::seed_from_u64(seed ^ splitmix64(key))
}

/// Index drawn from normalised `weights` by inverse CDF.
pub fn pick(weights: &[f64], rng: &mut impl rand::Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
