//! Reproducible random streams.
//!
//! Every consumer asks for a stream keyed by `(seed, purpose, index)`. The key
//! is folded through SplitMix64 and the result seeds a xoshiro256++ generator
//! (whose own seeding is again SplitMix64 expansion), so no two purposes
//! share state and nothing depends on call order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// One SplitMix64 step.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a, 64-bit. Stable across platforms and releases.
pub fn stable_hash(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Mixes a seed with further words into a new seed.
pub fn mix(seed: u64, words: &[u64]) -> u64 {
    let mut state = seed;
    let mut out = splitmix64(&mut state);
    for &w in words {
        state ^= w;
        out ^= splitmix64(&mut state);
        state = out;
    }
    out
}

pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    mix(seed, &[stable_hash(purpose), index])
}

pub fn stream(seed: u64, purpose: &str, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, purpose, index))
}
