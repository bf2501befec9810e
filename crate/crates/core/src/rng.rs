//! Seeded random streams.
//!
//! Every stochastic step in the toolkit draws from [`Xoshiro256PlusPlus`]
//! seeded through SplitMix64 (`seed_from_u64`), which makes the streams
//! portable across platforms. Per-sample streams mix a 64-bit FNV-1a hash of
//! the sample key into the seed so parallel work is order-independent.

use rand::SeedableRng;
pub use rand_xoshiro::Xoshiro256PlusPlus as Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Generator for a global seed.
pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Independent generator for `(seed, key)`.
pub fn stream(seed: u64, key: &str) -> Rng {
    let mixed = seed.wrapping_mul(GOLDEN_GAMMA).rotate_left(17) ^ fnv1a(key.as_bytes());
    Rng::seed_from_u64(mixed)
}
