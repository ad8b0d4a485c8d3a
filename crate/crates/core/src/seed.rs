//! Seed derivation.
//!
//! One global seed drives every stochastic stage. A stage gets its own seed
//! by mixing an FNV-1a hash of the stage name and an index into the global
//! seed with the SplitMix64 finalizer, so stages never share streams and
//! results do not depend on execution order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Human-readable description of the derivation, stored in artifacts.
pub const SEED_SCHEME: &str = "splitmix64(seed ^ fnv1a64(stage) ^ index*golden) -> chacha8";

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for item `index` of stage `stage` under global seed `seed`.
pub fn derive_seed(seed: u64, stage: &str, index: u64) -> u64 {
    splitmix64(seed ^ fnv1a64(stage) ^ index.wrapping_mul(GOLDEN))
}

/// Deterministic generator for item `index` of stage `stage`.
pub fn rng_for(seed: u64, stage: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stage, index))
}

/// One uniform draw in `[0, 1)` keyed by `(seed, stage, index)`.
pub fn uniform_for(seed: u64, stage: &str, index: u64) -> f64 {
    rng_for(seed, stage, index).gen::<f64>()
}
