//! Seed derivation. All randomness flows from a master seed that is fanned
//! out by hashing a path of integers or a name, so independent subsystems
//! can be reproduced on their own and in any order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The RNG used everywhere in the crate.
pub type SeedRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes `base` with every element of `path` into a new 64-bit seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Seed for a named stream ("init", "shuffle", "augment", ...).
pub fn named_seed(base: u64, name: &str) -> u64 {
    // FNV-1a keeps the name hash stable across toolchains.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive_seed(base, &[h])
}

pub fn rng_from(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}
