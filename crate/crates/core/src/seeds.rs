//! Root-seed fan-out.
//!
//! Every run owns a single root seed; components draw from named sub-streams
//! so that, e.g., re-seeding the sampler never perturbs data generation.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over bytes; tiny, stable, good enough for seed separation.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic sub-seed for (root, stream name, index).
pub fn derive_seed(root: u64, stream: &str, index: u64) -> u64 {
    let mut buf = Vec::with_capacity(16 + stream.len());
    buf.extend_from_slice(&root.to_le_bytes());
    buf.extend_from_slice(stream.as_bytes());
    buf.extend_from_slice(&index.to_le_bytes());
    fnv1a(&buf)
}

/// ChaCha stream for (root, stream name, index).
pub fn stream_rng(root: u64, stream: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, stream, index))
}
