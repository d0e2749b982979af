//! Deterministic, counter-derived random streams.
//!
//! Every random decision in the sampler draws from a ChaCha stream seeded by
//! (master seed, stream id, step, purpose). Streams are re-derived at each
//! step instead of carrying generator state across steps, so results do not
//! depend on thread scheduling and a reloaded model continues bit-identically
//! from its counters alone.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag for per-particle work within a step.
pub const PURPOSE_STEP: u64 = 1;
/// Purpose tag for the resampling draw.
pub const PURPOSE_RESAMPLE: u64 = 2;

/// SplitMix64 finalizer; decorrelates structured inputs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Derive the stream for (master, stream id, step, purpose).
pub fn derive_stream(master: u64, stream_id: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut s = mix(master);
    s = mix(s ^ stream_id);
    s = mix(s ^ step);
    s = mix(s ^ purpose);
    ChaCha8Rng::seed_from_u64(s)
}
