//! Deterministic random streams.
//!
//! All randomness in a run flows from one root seed. Each consumer derives
//! its own named stream, so adding or reordering consumers never perturbs
//! the others, and a resumed run can re-derive the stream for any step.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::hash::Fnv1a;

/// Derive an independent generator from `(seed, label)`.
pub fn sub_rng(seed: u64, label: &str) -> ChaCha12Rng {
    let mut h = Fnv1a::new();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    let mut key = [0u8; 32];
    let mut x = h.finish();
    for chunk in key.chunks_mut(8) {
        x ^= x >> 33;
        x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
        x ^= x >> 33;
        chunk.copy_from_slice(&x.to_le_bytes());
    }
    ChaCha12Rng::from_seed(key)
}

/// Derive a per-index stream, e.g. one per training step or per video.
pub fn sub_rng_indexed(seed: u64, label: &str, index: u64) -> ChaCha12Rng {
    sub_rng(seed, &format!("{label}/{index}"))
}

/// Standard normal draw via Box-Muller.
pub fn next_gaussian(rng: &mut impl Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

/// Fisher-Yates shuffle driven by the given generator.
pub fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}
