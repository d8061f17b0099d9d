//! Seed handling shared by every random component.
//!
//! All randomness flows from a `u64` seed through ChaCha8. Independent
//! substreams (one per optimiser step, per trial, per split) are obtained by
//! selecting a ChaCha stream, so a substream never depends on how many
//! numbers another substream consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for substream `stream` of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives a child seed, for APIs that take a plain seed rather than a
/// generator.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream ^ 0x9e37_79b9_7f4a_7c15).next_u64()
}
