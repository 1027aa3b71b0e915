use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::metrics::{compute_metrics, Confusion, Metrics};
use super::optim::{adam_step, cosine_warmup_lr, AdamHyper, AdamState, OptimizerKind};
use crate::autograd::Graph;
use crate::blocks::{Model, ModelConfig, Pass};
use crate::data::{assign_folds, Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::shift::{Direction, Placement, ShiftAugment, ShiftConfig};
use crate::tensor::Tensor;

fn default_lr() -> f64 {
    5e-4
}
fn default_wd() -> f64 {
    0.1
}
fn default_batch() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_warmup() -> usize {
    5
}
fn default_optimizer() -> OptimizerKind {
    OptimizerKind::AdamW
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr")]
    pub peak_lr: f64,
    /// Decoupled decay coefficient; ignored by plain Adam.
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Final learning rate as a fraction of the peak.
    #[serde(default)]
    pub min_lr_ratio: f64,
    /// Probability of shifting the hidden states of a training batch.
    #[serde(default)]
    pub augment_prob: f64,
    /// Shift proportion used by the augmentation; defaults to the model's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment_alpha: Option<f64>,
    /// Frames beyond this are dropped when batching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: default_optimizer(),
            peak_lr: default_lr(),
            weight_decay: default_wd(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            warmup_epochs: default_warmup(),
            seed: 0,
            min_lr_ratio: 0.0,
            augment_prob: 0.0,
            augment_alpha: None,
            max_frames: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be a finite non-negative rate"));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::config(
                "warmup_epochs",
                format!("{} warmup epochs for {} epochs", self.warmup_epochs, self.epochs),
            ));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::config("min_lr_ratio", "must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.max_frames == Some(0) {
            return Err(Error::config("max_frames", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return Err(Error::config(
                "augment_prob",
                format!("probability must lie in [0, 1], got {}", self.augment_prob),
            ));
        }
        Ok(())
    }

    /// Augmentation derived from the host model's shift, if enabled.
    pub fn augmentation(&self, model: &ModelConfig) -> Result<Option<ShiftAugment>> {
        if self.augment_prob == 0.0 {
            return Ok(None);
        }
        let base = model.shift.unwrap_or(ShiftConfig::new(
            0.25,
            Direction::Unidirectional,
            Placement::InPlace,
        ));
        let shift = ShiftConfig {
            alpha: self.augment_alpha.unwrap_or(base.alpha),
            ..base
        };
        shift.plan(model.input_channels())?;
        ShiftAugment::new(shift, self.augment_prob).map(Some)
    }
}

/// Padded `[B,L,T,C]` features with valid lengths and labels.
pub struct Batch {
    pub features: Tensor<f32>,
    pub lengths: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Pads `records` to the longest sequence, after truncation to `max_frames`.
pub fn make_batch(records: &[&FeatureSequence], max_frames: Option<usize>) -> Result<Batch> {
    let first = records
        .first()
        .ok_or_else(|| Error::EmptyInput("empty batch".into()))?;
    let (layers, ch) = (first.layers, first.channels);
    let cap = max_frames.unwrap_or(usize::MAX);
    let lengths: Vec<usize> = records.iter().map(|r| r.frames.min(cap)).collect();
    let frames = *lengths.iter().max().expect("non-empty");
    let mut data = vec![0f32; records.len() * layers * frames * ch];
    for (b, r) in records.iter().enumerate() {
        if r.layers != layers || r.channels != ch {
            return Err(Error::shape(format!(
                "record with {}x{} features in a batch of {layers}x{ch}",
                r.layers, r.channels
            )));
        }
        for l in 0..layers {
            let dst = ((b * layers + l) * frames) * ch;
            let src = l * r.frames * ch;
            let n = lengths[b] * ch;
            data[dst..dst + n].copy_from_slice(&r.data[src..src + n]);
        }
    }
    Ok(Batch {
        features: Tensor::new(&[records.len(), layers, frames, ch], data)?,
        lengths,
        labels: records.iter().map(|r| r.label as usize).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct FoldOutcome {
    pub metrics: Metrics,
    /// Mean training loss over the last epoch (`NaN` without training).
    pub final_loss: f64,
    pub curve: Vec<CurvePoint>,
    pub model: Model<f32>,
    /// Test logits in test-record order.
    pub logits: Vec<Vec<f32>>,
    pub labels: Vec<u32>,
}

fn check_records(cfg: &ModelConfig, records: &[&FeatureSequence]) -> Result<()> {
    for r in records {
        if r.layers != cfg.num_input_layers || r.channels != cfg.input_channels() {
            return Err(Error::config(
                "num_input_layers",
                format!(
                    "records carry {} layers x {} channels, the model expects {} x {}",
                    r.layers,
                    r.channels,
                    cfg.num_input_layers,
                    cfg.input_channels()
                ),
            ));
        }
        if r.label as usize >= cfg.num_classes {
            return Err(Error::config(
                "num_classes",
                format!("label {} with {} classes", r.label, cfg.num_classes),
            ));
        }
    }
    Ok(())
}

/// Logits for `records`, evaluated in batches of `batch_size`.
pub fn predict_records(
    model: &Model<f32>,
    records: &[&FeatureSequence],
    batch_size: usize,
    max_frames: Option<usize>,
) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch = make_batch(chunk, max_frames)?;
        let logits = model.predict(&batch.features, &batch.lengths)?;
        out.extend(logits.data().chunks_exact(logits.last_dim()).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub fn evaluate(
    model: &Model<f32>,
    records: &[&FeatureSequence],
    batch_size: usize,
    max_frames: Option<usize>,
) -> Result<(Metrics, Vec<Vec<f32>>)> {
    let logits = predict_records(model, records, batch_size, max_frames)?;
    let mut confusion = Confusion::new(model.config().num_classes);
    for (row, r) in logits.iter().zip(records) {
        confusion.add(r.label as usize, argmax(row));
    }
    Ok((compute_metrics(&confusion), logits))
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn diverged(step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { op } => Error::Divergence {
            step,
            detail: format!("non-finite output of {op}"),
        },
        other => other,
    }
}

/// Trains a fresh model on `train` and evaluates it on `test`.
pub fn train_fold(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train: &[&FeatureSequence],
    test: &[&FeatureSequence],
    fold: usize,
) -> Result<FoldOutcome> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    check_records(model_cfg, train)?;
    check_records(model_cfg, test)?;
    if train.is_empty() && train_cfg.epochs > 0 {
        return Err(Error::EmptyInput("no training records".into()));
    }
    let seed = train_cfg.seed;
    let mut model = Model::<f32>::build(model_cfg, seed ^ ((fold as u64) << 32))?;
    let augment = train_cfg.augmentation(model_cfg)?;
    let hyper = AdamHyper::new(train_cfg.optimizer, train_cfg.weight_decay);
    let mut states: Vec<AdamState> = model
        .params()
        .iter()
        .map(|p| AdamState::new(p.value.numel()))
        .collect();
    let mut shuffle = substream(seed, Stream::Shuffle, fold as u64);
    let mut aug_rng = substream(seed, Stream::Augment, fold as u64);

    let steps_per_epoch = train.len().div_ceil(train_cfg.batch_size);
    let total = train_cfg.epochs * steps_per_epoch;
    let warmup = train_cfg.warmup_epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(total);
    let mut final_loss = f64::NAN;
    let mut step = 0usize;

    for _epoch in 0..train_cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(train_cfg.batch_size) {
            let recs: Vec<&FeatureSequence> = idx.iter().map(|&i| train[i]).collect();
            let batch = make_batch(&recs, train_cfg.max_frames)?;
            let lr = cosine_warmup_lr(step, total, warmup, train_cfg.peak_lr, train_cfg.min_lr_ratio);

            let mut g = Graph::<f32>::new();
            let bound = model.bind(&mut g, true);
            let x = g.constant(batch.features);
            let mut pass = Pass::train();
            if let Some(a) = augment {
                pass = pass.with_augment(a, &mut aug_rng);
            }
            let logits = model
                .forward(&mut g, &bound, x, &batch.lengths, &mut pass)
                .map_err(|e| diverged(step, e))?;
            let loss_var = g.cross_entropy(logits, &batch.labels).map_err(|e| diverged(step, e))?;
            let loss = g.value(loss_var).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    detail: format!("loss = {loss}"),
                });
            }
            g.backward(loss_var)?;
            let updates = std::mem::take(&mut pass.bn_updates);
            drop(pass);
            for ((p, state), var) in model.params_mut().iter_mut().zip(&mut states).zip(bound.vars()) {
                if let Some(grad) = g.grad_data(*var) {
                    adam_step(p.value.data_mut(), grad, state, step as u64 + 1, lr, &hyper);
                }
            }
            model.apply_bn_updates(&updates);
            curve.push(CurvePoint { step, lr, loss });
            epoch_loss += loss * recs.len() as f64;
            step += 1;
        }
        final_loss = epoch_loss / train.len() as f64;
    }

    let (metrics, logits) = evaluate(&model, test, train_cfg.batch_size, train_cfg.max_frames)?;
    Ok(FoldOutcome {
        metrics,
        final_loss,
        curve,
        model,
        logits,
        labels: test.iter().map(|r| r.label).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSummary {
    pub fold: usize,
    pub metrics: Metrics,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldSummary>,
}

impl CvReport {
    pub fn mean_ua(&self) -> f64 {
        self.folds.iter().map(|f| f.metrics.ua).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_wa(&self) -> f64 {
        self.folds.iter().map(|f| f.metrics.wa).sum::<f64>() / self.folds.len() as f64
    }

    pub fn mean_loss(&self) -> f64 {
        self.folds.iter().map(|f| f.final_loss).sum::<f64>() / self.folds.len() as f64
    }

    /// One `fold=i ua= wa= loss=` row per fold and a closing mean row.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in &self.folds {
            writeln!(
                out,
                "fold={} ua={:.6} wa={:.6} loss={:.6}",
                f.fold, f.metrics.ua, f.metrics.wa, f.final_loss
            )
            .expect("string write");
        }
        writeln!(
            out,
            "mean ua={:.6} wa={:.6} loss={:.6}",
            self.mean_ua(),
            self.mean_wa(),
            self.mean_loss()
        )
        .expect("string write");
        out
    }
}

/// Leave-one-group-out cross-validation. `on_fold` sees every fold's full
/// outcome (model, curve, logits) before it is reduced to a summary.
pub fn cross_validate<Sink>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    n_folds: usize,
    mut on_fold: Sink,
) -> Result<CvReport>
where
    Sink: FnMut(usize, &FoldOutcome) -> Result<()>,
{
    let plan = assign_folds(&ds.records, n_folds)?;
    let mut folds = Vec::with_capacity(plan.len());
    for (i, fold) in plan.iter().enumerate() {
        let train: Vec<&FeatureSequence> = fold.train.iter().map(|&j| &ds.records[j]).collect();
        let test: Vec<&FeatureSequence> = fold.test.iter().map(|&j| &ds.records[j]).collect();
        let outcome = train_fold(model_cfg, train_cfg, &train, &test, i)?;
        on_fold(i, &outcome)?;
        folds.push(FoldSummary {
            fold: i,
            metrics: outcome.metrics,
            final_loss: outcome.final_loss,
        });
    }
    Ok(CvReport { folds })
}
