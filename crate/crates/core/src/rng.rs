//! Seed derivation for the independent random streams the engine owns.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers; each consumer draws from its own stream so that the
/// order of draws in one cannot perturb another.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    InitialNoise = 1,
    StepNoise = 2,
    Anchor = 3,
    Tint = 4,
    Synth = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a stream tag and an index path into a sub-seed.
pub fn derive_seed(base: u64, stream: Stream, path: &[u64]) -> u64 {
    let mut h = splitmix64(base ^ splitmix64(stream as u64));
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

pub fn stream_rng(base: u64, stream: Stream, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, path))
}
