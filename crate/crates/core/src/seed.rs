//! Seed derivation.
//!
//! Every random stream in a run (data pool, partition, client sampling,
//! per-client training) is keyed by a tuple of integers folded into a single
//! `u64` with splitmix64, so that streams stay independent of scheduling and
//! thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Kept stable: changing one changes every recorded run.
pub mod tag {
    pub const POOL: u64 = 0x706f_6f6c;
    pub const PARTITION: u64 = 0x7061_7274;
    pub const INIT: u64 = 0x696e_6974;
    pub const SAMPLE: u64 = 0x7361_6d70;
    pub const CLIENT: u64 = 0x636c_6e74;
    pub const GRADLTN: u64 = 0x6c74_6e00;
    pub const PERSONAL_PASS: u64 = 0x7670_6173;
    pub const EPOCH: u64 = 0x6570_6f63;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds `parts` into `base`, order-sensitively.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
