//! Seeded random streams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream addressed by
//! `(seed, domain, a, b)`, so results do not depend on thread count or on the
//! order in which work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains. Keeping them distinct stops two stages that share a seed
/// from drawing correlated numbers.
pub mod domain {
    pub const PHANTOM: u64 = 1;
    pub const ACQ_SLICE: u64 = 2;
    pub const ACQ_BURST: u64 = 3;
    pub const NET_INIT: u64 = 4;
    pub const BATCH: u64 = 5;
    pub const PSF: u64 = 6;
    pub const REG_COORDS: u64 = 7;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent generator for the work item `(a, b)` of `domain`.
pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let key = splitmix64(seed ^ splitmix64(domain.wrapping_mul(0x2545_F491_4F6C_DD1D)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream((a << 32) ^ b);
    rng
}
