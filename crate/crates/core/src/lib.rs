//! Character-level adversarial attacks against a small char-level text
//! classifier.
//!
//! The crate trains a transformer-style character classifier from scratch and
//! attacks it by optimizing a perturbation in the character embedding space,
//! discretizing the perturbed embeddings back to characters via
//! nearest-neighbor substitution. A K-means random-substitution baseline, the
//! usual success-rate metrics, a transferability harness and a human-study
//! export round out the toolkit.
//!
//! Modules map onto the pipeline stages:
//!
//! - [`vocab`]: character vocabulary and text <-> id conversion
//! - [`model`]: the classifier, forward passes and gradients
//! - [`trainer`]: cross-entropy training, Adam, checkpoints
//! - [`advchar`]: the embedding-space attack
//! - [`baseline`]: K-means cluster random substitution
//! - [`eval`]: success-rate metrics, evaluation runs, transfer, study export
//! - [`data`]: JSONL datasets and label maps
//! - [`synth`]: synthetic planted-keyword dataset generation

#![allow(clippy::needless_range_loop)]

pub mod advchar;
pub mod baseline;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};

/// Scalar type used throughout the numeric code. Defaults to single
/// precision; the `f64` feature switches the whole crate to double precision
/// (used by oracle tests that want tighter tolerances).
#[cfg(not(feature = "f64"))]
pub type Float = f32;
#[cfg(feature = "f64")]
pub type Float = f64;

/// Derives an independent sub-seed from a base seed and a stream index.
///
/// Used wherever one run seed has to fan out into many reproducible RNG
/// streams (per-epoch shuffles, per-example attack RNGs) without the streams
/// overlapping. splitmix64 finalizer over the combined words.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        ^ stream
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
