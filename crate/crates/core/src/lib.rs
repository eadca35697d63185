//! Tree-like pairwise interaction network (PIN) for exposure-weighted
//! frequency regression, with interaction-importance forward selection and
//! exact paired-permutation Shapley explanations.

pub mod data;
pub mod embedding;
pub mod error;
pub mod importance;
pub mod loss;
pub mod model;
pub mod numeric;
pub mod persist;
pub mod shap;
pub mod synth;
pub mod testing;
pub mod training;

pub use data::{Dataset, FeatureKind, FeatureSchema, FeatureSpec, MinMaxScaler, ScalerSet};
pub use error::{PinError, Result};
pub use model::{pin_backward, pin_forward, PinConfig, PinModel, PinParams};
pub use training::{ensemble_predict, evaluate, train, TrainConfig, TrainHistory};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random stream for parameter initialization.
pub const STREAM_INIT: u64 = 0;
/// Random stream for per-epoch batch shuffling.
pub const STREAM_SHUFFLE: u64 = 1;
/// Random stream for train/validation splits.
pub const STREAM_SPLIT: u64 = 2;
/// Random stream for background and instance sampling.
pub const STREAM_SAMPLE: u64 = 3;
/// Random stream for synthetic data.
pub const STREAM_SYNTH: u64 = 4;
/// Random stream for choosing explained instances.
pub const STREAM_INSTANCES: u64 = 5;

/// A ChaCha8 generator on an independent stream of `seed`.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
