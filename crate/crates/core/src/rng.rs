//! Seeded randomness. Everything stochastic in the crate draws from a
//! ChaCha8 stream so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent seed for a sub-stream (per sample, per epoch, ...).
pub fn mix(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in the open interval (0, 1).
pub fn uniform_open(rng: &mut Prng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn uniform(rng: &mut Prng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Standard normal via Box-Muller.
pub fn normal(rng: &mut Prng) -> f64 {
    let u1 = uniform_open(rng);
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
}

/// Logistic noise `ln u - ln(1 - u)`, the difference of two Gumbel draws.
pub fn logistic(rng: &mut Prng) -> f64 {
    let u = uniform_open(rng);
    libm::log(u) - libm::log1p(-u)
}

pub fn below(rng: &mut Prng, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Fisher-Yates.
pub fn shuffle<T>(rng: &mut Prng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
