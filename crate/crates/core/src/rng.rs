//! Seeded random-number streams.
//!
//! Every randomized operation derives its generator from a user-supplied
//! 64-bit seed plus a stage name, so stages are reproducible in isolation:
//! rerunning clustering or the final training stage alone consumes the same
//! stream it would inside the full pipeline.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a hash of a byte string, used to map stage names to stream ids.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic generator for `(seed, stage)`.
///
/// The same seed with different stage names yields independent streams of
/// the same underlying ChaCha8 keystream family.
pub fn stage_rng(seed: u64, stage: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a64(stage.as_bytes()));
    rng
}
