//! Counter-based random streams.
//!
//! Every stochastic quantity is drawn from a stream keyed by
//! `(master seed, purpose, point index, realization index)`. The key is mixed
//! with SplitMix64 into a 256-bit ChaCha8 seed, so a stream never depends on
//! which thread evaluates it or in which order points are visited.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags separating independent uses of the same master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Shadowing = 1,
    DelayField = 2,
    ScatterField = 3,
    Fading = 4,
    FimDraws = 5,
    LocationDraws = 6,
    Throughput = 7,
    Verification = 8,
    Test = 9,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds the stream key into a single 64-bit state.
pub fn stream_key(seed: u64, purpose: Purpose, point: u64, realization: u64) -> u64 {
    let mut s = seed;
    let mut h = splitmix64(&mut s);
    for word in [purpose as u64, point, realization] {
        let mut t = h ^ word.wrapping_mul(GOLDEN);
        h = splitmix64(&mut t);
    }
    h
}

pub fn stream(seed: u64, purpose: Purpose, point: u64, realization: u64) -> ChaCha8Rng {
    let mut s = stream_key(seed, purpose, point, realization);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}
