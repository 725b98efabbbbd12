//! Named random sub-streams derived from a single master seed.
//!
//! Every consumer of randomness (data generation, partitioning, initialisation,
//! batch order, client sampling, baseline masks) draws from its own stream, so
//! enabling one feature never perturbs the draws of another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for the stream `name` indexed by `indices` (e.g. round and client).
pub fn derive_seed(master: u64, name: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix64(master);
    for b in name.bytes() {
        h = splitmix64(h ^ u64::from(b));
    }
    // separator so ("ab", [1]) and ("a", [..]) never collide trivially
    h = splitmix64(h ^ 0xFF);
    for &i in indices {
        h = splitmix64(h ^ i);
    }
    h
}

pub fn stream(master: u64, name: &str, indices: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(master, name, indices))
}
