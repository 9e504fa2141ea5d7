//! Reproducible random streams.
//!
//! Every random draw is taken from a ChaCha stream addressed by
//! `(seed, stream id)`, so the values a task sees depend only on its address
//! and never on how tasks are scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a path of labels into a child seed.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

/// Independent generator for stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream labels used across the crate.
pub(crate) mod label {
    pub const BOOTSTRAP: u64 = 1;
    pub const DGP_COVARIATES: u64 = 2;
    pub const DGP_TREATMENT: u64 = 3;
    pub const DGP_SAMPLE: u64 = 4;
    pub const GRID: u64 = 5;
    pub const PLACEBO: u64 = 6;
}
