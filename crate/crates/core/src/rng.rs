//! Seeded generators. Every random decision in the crate flows through a
//! [`SplitMix64`] so that identical seeds give identical artifacts.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

/// Generator for a top-level seed.
pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from `(seed, stream)`.
///
/// Used for per-fold and per-phase generators so that fold `k` gets the same
/// randomness regardless of how many folds run or in which order.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer over the mixed pair
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
