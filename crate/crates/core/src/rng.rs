//! Seeded generators. Every random draw in a run comes from a ChaCha8
//! stream derived from the run seed, one stream per purpose, so that e.g.
//! changing the number of epochs never perturbs the initial weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: u64 = 0;
pub const STREAM_SHUFFLE: u64 = 1;
pub const STREAM_FEEDBACK: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_PROBE: u64 = 4;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
