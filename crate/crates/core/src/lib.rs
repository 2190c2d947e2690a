//! Macro action quantization laboratory.
//!
//! Distills smooth demonstration behavior into a discrete codebook of macro
//! actions with a conditional vector-quantized autoencoder, trains discrete
//! soft actor-critic agents over codebook indices on a small deterministic
//! control task, and scores how closely agent trajectories track the
//! demonstrations with DTW and exact Wasserstein distances.
//!
//! Module map:
//!
//! * [`nn`]: dense networks with analytic gradients, Adam, categorical sampling.
//! * [`env`]: the `LatchDoor` task, scripted demonstrations, random rollouts.
//! * [`dataset`]: trajectory persistence, macro extraction, splits, normalization.
//! * [`vqvae`]: conditional VQ autoencoder over macro actions.
//! * [`smdp`]: macro-level stepping, offline transitions, replay buffers.
//! * [`agents`]: discrete SAC over codes or grid actions, behavior cloning, evaluation.
//! * [`similarity`]: DTW, Wasserstein, normalized similarity reports.

pub mod agents;
pub mod dataset;
pub mod env;
pub mod error;
pub mod nn;
pub mod similarity;
pub mod smdp;
pub mod textio;
pub mod vqvae;

pub use error::{MaqError, Result};

/// Seeded generator used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Builds the crate-wide generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Derives an independent stream seed from a base seed and a stream tag.
///
/// SplitMix64 finalizer over the combined value, so nearby bases and tags do
/// not produce correlated generators.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    let mut z = base
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(tag.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
