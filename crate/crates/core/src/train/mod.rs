//! Optimization, metrics and the cross-validation runner.

mod metrics;
mod optim;
mod trainer;

pub use metrics::{compute_metrics, pair_recall, Confusion, Metrics};
pub use optim::{adam_step, cosine_warmup_lr, AdamHyper, AdamState, OptimizerKind};
pub use trainer::{
    cross_validate, evaluate, make_batch, predict_records, train_fold, Batch, CurvePoint, CvReport,
    FoldOutcome, FoldSummary, TrainConfig,
};
