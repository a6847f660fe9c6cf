//! Seeded randomness.
//!
//! All random tensors come from ChaCha8 seeded with a 64-bit value through
//! `SeedableRng::seed_from_u64`, and normals are drawn with `rand_distr`'s
//! `StandardNormal`. Same seed, same build, same bits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derive an independent stream for a named purpose from a base seed.
pub fn derived(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
