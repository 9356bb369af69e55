//! Seed-derived deterministic RNG streams.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Derived 64-bit seed from a root seed plus context parts, for handing to
/// components that take a seed rather than an RNG.
pub fn derive(seed: u64, parts: &[u64]) -> u64 {
    let mut state = splitmix(seed);
    for &p in parts {
        state = splitmix(state ^ p.wrapping_mul(0xD1B54A32D192ED03));
    }
    state
}

/// Independent stream keyed by a root seed plus context parts, e.g.
/// `(seed, example_index, step)`.
pub fn stream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut state = splitmix(seed);
    for &p in parts {
        state = splitmix(state ^ p.wrapping_mul(0xD1B54A32D192ED03));
    }
    ChaCha8Rng::seed_from_u64(state)
}
