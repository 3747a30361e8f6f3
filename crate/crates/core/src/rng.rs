//! Deterministic random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from a
//! master seed, so trials are reproducible bit-for-bit and independent of the
//! order in which worker threads pick them up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream ids reserved inside a trial. Node streams use `NODE_BASE + node`.
pub const STREAM_CLOCKS: u64 = 1;
pub const STREAM_COMMON_NOISE: u64 = 2;
pub const STREAM_SDE_COMMON: u64 = 3;
pub const STREAM_TOPOLOGY: u64 = 4;
pub const STREAM_SCENARIO: u64 = 5;
pub const NODE_BASE: u64 = 1 << 20;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of trial `trial` under `master`.
pub fn trial_seed(master: u64, trial: u64) -> u64 {
    splitmix64(master ^ splitmix64(trial.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn node_stream(seed: u64, node: usize) -> SimRng {
    stream(seed, NODE_BASE + node as u64)
}
