//! Seed derivation for reproducible, order-independent randomness.
//!
//! Every random stream in a simulation is keyed by the master seed plus a
//! small tuple (stream tag, round, client id, ...). Streams never share state,
//! so the order in which clients are simulated cannot change their outputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(master), |acc, &p| mix(acc ^ mix(p)))
}

pub fn rng_for(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}

/// Stream tags.
pub mod stream {
    pub const TRUTH: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SAMPLING: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const NETS: u64 = 5;
    pub const INIT_POOL: u64 = 6;
    pub const PROTOTYPES: u64 = 7;
    pub const GMM: u64 = 8;
}
