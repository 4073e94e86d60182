//! Seeded randomness.
//!
//! Every stochastic operation takes an explicit seed and draws from
//! xoshiro256++, whose 256-bit state is expanded from the 64-bit seed with
//! splitmix64. Independent streams are derived by folding labels into the seed
//! with the splitmix64 finalizer, so a cell's stream never depends on which
//! other cells ran or in what order.

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// splitmix64 output function.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the sub-stream identified by `labels` under `base`.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    labels
        .iter()
        .fold(splitmix64(base), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

/// Stream tags used with [`derive_seed`].
pub mod stream {
    pub const SYNTH_DATA: u64 = 1;
    pub const SPLIT: u64 = 2;
    pub const SUBSAMPLE: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const DROPOUT: u64 = 6;
    pub const REPEAT: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}
