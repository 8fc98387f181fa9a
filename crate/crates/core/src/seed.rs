//! Deterministic sub-seed derivation.
//!
//! Every random stream in a run is keyed by the top-level seed, a role
//! string and a list of integer indices:
//!
//! ```text
//! h = FNV-1a-64(role bytes)
//! s = splitmix64(seed ^ h)
//! for i in indices: s = splitmix64(s ^ i)
//! ```
//!
//! The rule does not depend on thread scheduling, so rollouts sampled in
//! parallel see the same streams as sequential ones.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, role: &str, indices: &[u64]) -> u64 {
    let mut s = splitmix64(seed ^ fnv1a(role.as_bytes()));
    for &i in indices {
        s = splitmix64(s ^ i);
    }
    s
}

pub fn rng(seed: u64, role: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, role, indices))
}
