//! Splittable seeding.
//!
//! Every random choice in the engine is keyed by a 64-bit seed derived from a
//! single run seed. Child seeds depend only on `(parent, step, index)`, so the
//! content of candidate `i` never depends on how many other candidates were
//! requested or in which order requests completed.

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `child_seed = hash64(parent_seed, step_index, candidate_index)`.
pub fn derive_seed(parent: u64, step: u64, index: u64) -> u64 {
    let a = splitmix64(parent ^ 0x6A09_E667_F3BC_C908);
    let b = splitmix64(a ^ step.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    splitmix64(b ^ index.wrapping_mul(0xA076_1D64_78BD_642F))
}

/// Stable 64-bit hash of a string (FNV-1a, then mixed).
pub fn hash_str(s: &str) -> u64 {
    hash_bytes(s.as_bytes())
}

/// Stable 64-bit hash of a byte string (FNV-1a, then mixed).
pub fn hash_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    splitmix64(h)
}

/// Stable hash of a sequence of small integers under a salt.
pub fn hash_seq(salt: u64, items: &[usize]) -> u64 {
    let mut h = splitmix64(salt);
    for &x in items {
        h = splitmix64(h ^ (x as u64).wrapping_add(0x1234_5678));
    }
    h
}

/// Maps a hash to a uniform value in `[0, 1)`.
#[inline]
pub fn unit_interval(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
