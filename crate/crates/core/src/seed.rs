//! Seed derivation. Every random stream in the simulator is a ChaCha8 stream
//! keyed by a base seed mixed with a fixed tag path, so streams never depend
//! on call order or thread schedule.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TAG_WORLD_BASE: u64 = 0x0b_a5e;
pub const TAG_WORLD_SHARED: u64 = 0x5a_43ed;
pub const TAG_WORLD_SPECIFIC: u64 = 0x5_9ec1;
pub const TAG_WORLD_ASSIGN: u64 = 0xa5_5164;
pub const TAG_CLIENT_DATA: u64 = 0xda_7a;
pub const TAG_RESOURCES: u64 = 0x2e_5022;
pub const TAG_SAMPLING: u64 = 0x5a_3b1e;
pub const TAG_LOCAL: u64 = 0x10_ca1;
pub const TAG_INIT: u64 = 0x1_2171;
pub const TAG_UNSEEN: u64 = 0x0_95ee;
pub const TAG_HOLDOUT: u64 = 0x401d_0;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `parts` into `base`, order-sensitively.
pub fn derive(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(base, parts))
}
