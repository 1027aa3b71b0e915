use serde::{Deserialize, Serialize};

use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Adam with decoupled weight decay.
    AdamW,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub kind: OptimizerKind,
}

impl AdamHyper {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            kind,
        }
    }
}

/// First and second moments of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One Adam/AdamW update at step `t` (1-based) with bias correction.
pub fn adam_step<F: Real>(
    param: &mut [F],
    grad: &[F],
    state: &mut AdamState,
    t: u64,
    lr: f64,
    hyper: &AdamHyper,
) {
    let bc1 = 1.0 - hyper.beta1.powf(t as f64);
    let bc2 = 1.0 - hyper.beta2.powf(t as f64);
    let decay = match hyper.kind {
        OptimizerKind::AdamW => lr * hyper.weight_decay,
        OptimizerKind::Adam => 0.0,
    };
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        let m = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let mut theta = param[i].as_f64();
        theta -= decay * theta;
        theta -= lr * (m / bc1) / ((v / bc2).sqrt() + hyper.eps);
        param[i] = F::of(theta);
    }
}

/// Linear warmup from 0 to `peak`, then cosine decay to `peak * min_ratio`.
pub fn cosine_warmup_lr(step: usize, total: usize, warmup: usize, peak: f64, min_ratio: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if total <= warmup {
        return peak;
    }
    let progress = ((step - warmup) as f64 / (total - warmup) as f64).min(1.0);
    peak * (min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}
