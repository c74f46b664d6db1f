//! Differentiable building blocks shared by every network in the crate.

pub mod checkpoint;
pub mod mlp;
pub mod optim;
pub mod params;
pub mod time;

pub use checkpoint::{write_atomic, Checkpoint};
pub use mlp::{sigmoid, Activation, Linear, Mlp, MlpTape, PairGrads, PairInputs, PairTape};
pub use optim::{cosine_lr, OptState, OptimizerConfig};
pub use params::{accumulate, flatten, param_count, unflatten, ParamSet, Scalar};
pub use time::{time_encoding, DEFAULT_TIME_DIM};

/// Seeded generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Derives an independent generator from a base seed and a stream tag, so
/// work indexed by step or molecule is reproducible without replaying
/// earlier draws.
pub fn derived_rng(seed: u64, stream: u64) -> Rng {
    use rand::SeedableRng;
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    Rng::seed_from_u64(z)
}
