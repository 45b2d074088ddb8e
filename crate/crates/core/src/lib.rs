//! Robust fine-tuning of linear adapters over frozen vision-language features.
//!
//! The crate trains a pair of square linear adapters on precomputed image and
//! text features so that a single model both generalizes to covariate-shifted
//! closed-set data and separates open-set (unseen-class) data by its energy
//! score. Training combines cross-entropy, a penalty on the magnitude of the
//! energy-score gradient, and an adversarial linear generator that produces
//! worst-case shifted features.

pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod features;
pub mod generator;
pub mod grad;
pub mod gradcheck;
pub mod instance;
pub mod losses;
pub mod model;
pub mod synth;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{CroftError, Result};
pub use eval::{Detector, MetricsReport};
pub use features::{FeatureSet, Role};
pub use generator::GeneratorParams;
pub use grad::{FlatParamVector, ParamGradient};
pub use losses::{Batch, EdrVariant, LossBreakdown, LossWeights};
pub use model::{AdapterParams, ScoreMatrix, SoftmaxCache};
pub use synth::{Benchmark, SynthConfig};
pub use trainer::{Checkpoint, Mode, TrainConfig};
