//! Seed derivation for per-purpose random streams.
//!
//! Every randomized routine owns a private ChaCha8 stream derived from the
//! experiment seed, a purpose salt, and up to two indices (epoch, batch, user,
//! ...). Streams never share state, so disabling one consumer cannot shift the
//! draws of another; bit-reproducibility then follows from the seed alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose salts. Distinct constants keep derived streams disjoint.
pub mod salts {
    pub const MODEL_INIT: u64 = 1;
    pub const NET_INIT: u64 = 2;
    pub const TARGET_SEEDS: u64 = 3;
    pub const SPECTRAL_INIT: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const HOLDOUT: u64 = 6;
    pub const SHUFFLE: u64 = 7;
    pub const NEGATIVES: u64 = 8;
    pub const DROPOUT: u64 = 9;
    pub const CANDIDATES: u64 = 10;
    pub const ATTACKER: u64 = 11;
    pub const DOMAIN_BATCH: u64 = 12;
    pub const SYNTHETIC: u64 = 13;
    pub const SUBSAMPLE: u64 = 14;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds (seed, salt, a, b) into one well-mixed 64-bit seed.
pub fn derive_seed(seed: u64, salt: u64, a: u64, b: u64) -> u64 {
    let mut h = splitmix(seed);
    h = splitmix(h ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    h = splitmix(h ^ a.wrapping_mul(0xC2B2_AE3D_27D4_EB4F));
    splitmix(h ^ b.wrapping_mul(0x1656_67B1_9E37_79F9))
}

/// Fresh single-purpose stream.
pub fn stream(seed: u64, salt: u64, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, salt, a, b))
}
