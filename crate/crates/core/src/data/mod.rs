//! Feature files, manifests, synthetic data and folds.

mod folds;
mod fseq;
mod manifest;
mod synth;

pub use folds::{assign_folds, Fold};
pub use fseq::{decode, encode, read_fseq, write_fseq, Dataset, FeatureSequence, HEADER_BYTES, MAGIC, VERSION};
pub use manifest::Manifest;
pub use synth::{gen_synthetic, render, Pattern, SynthConfig, NUM_CLASSES};
