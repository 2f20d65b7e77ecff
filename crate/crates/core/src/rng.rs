//! Seeding helpers. Every random draw in the crate comes from a ChaCha8
//! stream addressed by `(seed, stream)`, so results do not depend on thread
//! scheduling.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::grid::{Grid, ScalarField, SineSeries};

/// Number of sine modes per axis in random test fields.
pub const TEST_FIELD_MODES: usize = 8;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a seed with an index (splitmix64 finaliser).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random sine series for trial `stream`; identical on every grid.
pub fn random_series(seed: u64, stream: u64) -> SineSeries {
    SineSeries::random(&mut stream_rng(seed, stream), TEST_FIELD_MODES)
}

/// Collar-masked random field for trial `stream`.
pub fn random_tangent(grid: &Arc<Grid>, seed: u64, stream: u64) -> ScalarField {
    random_series(seed, stream).tangent_field(grid)
}
