//! Stable hashing primitives shared by the Bloom filters, the partitioner
//! and the per-stratum seed derivation.
//!
//! Everything here is fixed for the lifetime of the on-disk formats: filter
//! blobs, sigma-store fingerprints and seeded runs must reproduce byte for
//! byte across builds, so no std hasher (whose algorithm is unspecified) is
//! used anywhere.

/// SplitMix64 finalizer; a full-avalanche 64-bit mix.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// FNV-1a over raw bytes; used to map non-numeric CSV keys into the u64 key
/// space and to fingerprint canonical query text.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const PARTITIONER_SALT: u64 = 0x61c8_8647_34c2_a5b1;

/// Hash partitioner: the worker that owns `key` in a `k`-worker cluster.
///
/// The sampler and every engine strategy must agree on this map, which is
/// why it lives here rather than in the engine.
pub fn partition_owner(key: u64, k: usize) -> usize {
    debug_assert!(k >= 1);
    (splitmix64(key ^ PARTITIONER_SALT) % k as u64) as usize
}

const STRATUM_SEED_SALT: u64 = 0x2545_f491_4f6c_dd1d;

/// Derive the per-stratum RNG seed from the master seed and the join key.
///
/// Keyed on the join key only, so the draw sequence of a stratum does not
/// depend on which worker samples it or on the worker count.
pub fn derive_stratum_seed(master_seed: u64, key: u64) -> u64 {
    splitmix64(master_seed ^ splitmix64(key ^ STRATUM_SEED_SALT))
}
