pub mod autograd;
pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod environment;
pub mod error;
pub mod evalkit;
pub mod gradcheck;
pub mod graph_embed;
pub mod params;
pub mod pipeline;
pub mod policy;
pub mod recommender;
pub mod simulator;
pub mod synth;

pub use error::{Error, Result};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent RNG stream `stream` under a base seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
