//! Random stream hierarchy.
//!
//! `master seed -> unit (subject or replicate) -> named stream`. Every unit owns
//! an independent ChaCha stream per purpose, so a replicate's draws never depend
//! on how many other replicates ran, in which order, or on which thread. It also
//! means two strategies evaluated with the same seed see exactly the same
//! diffusion and measurement noise (common random numbers).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose of a random stream within one unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    InitialCondition = 0,
    RandomEffects = 1,
    Diffusion = 2,
    Measurement = 3,
    Strategy = 4,
    Assignment = 5,
    Covariates = 6,
    Posterior = 7,
}

const STREAMS_PER_UNIT: u64 = 16;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from a parent seed and a path of tags.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(master), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0x5851_F42D_4C95_7F2D))))
}

/// The stream for `(master, unit, purpose)`.
pub fn stream(master: u64, unit: u64, purpose: Stream) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(master));
    rng.set_stream(unit.wrapping_mul(STREAMS_PER_UNIT) + purpose as u64);
    rng
}
