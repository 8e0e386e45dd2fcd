//! Keyed, splittable random streams.
//!
//! Every stochastic task derives its own generator from `(seed, domain,
//! index, lane)`. Streams never depend on scheduling, so results are
//! bit-identical for any worker count.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Domain separators for the independent stream families.
pub mod domain {
    pub const PILOT: u64 = 1;
    pub const CALIBRATE: u64 = 2;
    pub const DRAW: u64 = 3;
    pub const BANDIT: u64 = 4;
    pub const SERIES: u64 = 5;
    pub const TEST: u64 = 99;
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent ChaCha stream for `(seed, domain, index, lane)`.
pub fn stream(seed: u64, domain: u64, index: u64, lane: u64) -> ChaCha8Rng {
    let mut state = 0x243F_6A88_85A3_08D3u64;
    for word in [seed, domain, index, lane] {
        state ^= word;
        let _ = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Uniform draw on the open interval (0, 1).
pub fn open01<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 && u < 1.0 {
            return u;
        }
    }
}
