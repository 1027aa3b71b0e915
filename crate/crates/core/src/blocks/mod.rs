//! Block definitions and full classifiers.

pub mod checkpoint;
mod config;
mod model;

pub use config::{ConvKind, Family, Mixer, ModelConfig, NormKind, Preset, ShiftScope};
pub use model::{random_features, Bound, Model, Param, Pass, RunningStats};
