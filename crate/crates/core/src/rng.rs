//! Seeded random streams.
//!
//! Every stochastic component takes an explicit generator so that runs are
//! reproducible bit for bit. Independent streams are derived from a base seed
//! with a splitmix64 mix of a tag, never by sharing one generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for the stream named `tag`.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = splitmix64(base);
    for b in tag.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    h
}

pub fn derive_seed_n(base: u64, tag: &str, n: u64) -> u64 {
    splitmix64(derive_seed(base, tag) ^ n)
}
