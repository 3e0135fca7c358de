//! Seed derivation and the crate's deterministic generator.
//!
//! Every stochastic component receives its own generator seeded from
//! `(master_seed, component_name, index)`. The derivation is a fixed
//! FNV-1a + splitmix64 mix, so seeds are stable across platforms and
//! toolchain versions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Derives a component seed from a master seed, a component name and an index.
pub fn derive_seed(master: u64, component: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ fnv1a(component.as_bytes()));
    splitmix64(h ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Seed derived from the content of a token sequence rather than its position.
pub fn content_seed(master: u64, component: &str, tokens: &[u32]) -> u64 {
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    derive_seed(master, component, fnv1a(&bytes))
}

pub fn rng_from_seed(seed: u64) -> LabRng {
    LabRng::seed_from_u64(seed)
}

pub fn derive_rng(master: u64, component: &str, index: u64) -> LabRng {
    rng_from_seed(derive_seed(master, component, index))
}
