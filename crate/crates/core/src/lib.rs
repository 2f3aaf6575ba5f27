//! Cached-feature surgical phase segmentation.
//!
//! Frozen per-frame encoder features are cached once ([`feature_store`]) and a
//! fixed MS-TCN++ temporal head ([`mstcn`]) is trained on them with a pinned
//! optimisation recipe ([`training`]). Evaluation runs over stratified folds
//! ([`splits`]) and reports frame-level and segment-level scores ([`metrics`]).
//!
//! Heavy inner loops (convolution kernels, per-video metric batches, fold
//! sweeps) run on rayon when the `parallel` feature is enabled and fall back
//! to plain iteration otherwise; both paths produce bit-identical results.

pub mod autodiff;
pub mod exec;
pub mod feature_store;
pub mod metrics;
pub mod mstcn;
pub mod ribbon;
pub mod splits;
pub mod training;

pub use exec::Execution;
pub use feature_store::{FeatureSequence, LabelSequence};
pub use mstcn::{ModelConfig, ModelParams};
pub use training::{TrainConfig, Video};
