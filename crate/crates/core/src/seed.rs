//! Seed derivation for reproducible parallel work: every replicate draws
//! from its own stream, keyed by (master seed, purpose, index), so results do
//! not depend on scheduling or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedTag {
    Dataset = 1,
    Perturbation = 2,
    Calibration = 3,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn derive_seed(master: u64, tag: SeedTag, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(tag as u64)) ^ splitmix64(index.wrapping_add(0x5851_F42D)))
}

pub fn rng_for(master: u64, tag: SeedTag, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, tag, index))
}
