//! Exact parameter and FLOP accounting.
//!
//! FLOPs are counted for one sequence of `T` frames. Matrix products and
//! convolutions count two FLOPs per multiply-accumulate and are reported as
//! `matmul`; normalizations, activations and additions are `elementwise`
//! with fixed per-element costs; the temporal shift is pure data movement.

use std::fmt;

use crate::autograd::PositionMode;
use crate::blocks::{ConvKind, Family, Mixer, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::shift::Placement;
use crate::tensor::Real;

/// Per-element cost of layer/batch normalization (mean, variance, centre,
/// scale, shift).
pub const NORM_COST: u64 = 5;
pub const GELU_COST: u64 = 8;
/// Per-score cost of a softmax (max, exp, normalize).
pub const SOFTMAX_COST: u64 = 3;
/// Per-unit cost of the LSTM gate nonlinearities and state update.
pub const LSTM_CELL_COST: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostKind {
    Matmul,
    Elementwise,
    DataMovement,
}

impl CostKind {
    pub fn name(self) -> &'static str {
        match self {
            CostKind::Matmul => "matmul",
            CostKind::Elementwise => "elementwise",
            CostKind::DataMovement => "data_movement",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostEntry {
    pub name: String,
    pub kind: CostKind,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub frames: usize,
    pub entries: Vec<CostEntry>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_flops(&self) -> u64 {
        self.entries.iter().map(|e| e.flops).sum()
    }

    pub fn flops_of(&self, kind: CostKind) -> u64 {
        self.entries.iter().filter(|e| e.kind == kind).map(|e| e.flops).sum()
    }

    /// Parameters whose entry name starts with `prefix`.
    pub fn params_under(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.params)
            .sum()
    }

    /// Parameters of every block entry whose name contains `part`, e.g. `.attn.`.
    pub fn params_matching(&self, part: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.name.contains(part))
            .map(|e| e.params)
            .sum()
    }

    /// Machine-readable form: one `key=value` line per op, then totals.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out += &format!(
                "op={} kind={} params={} flops={}\n",
                e.name,
                e.kind.name(),
                e.params,
                e.flops
            );
        }
        out += &format!(
            "total frames={} params={} flops={} matmul_flops={} elementwise_flops={}\n",
            self.frames,
            self.total_params(),
            self.total_flops(),
            self.flops_of(CostKind::Matmul),
            self.flops_of(CostKind::Elementwise)
        );
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.entries.iter().map(|e| e.name.len()).max().unwrap_or(2).max(5);
        let mut out = format!(
            "{:<width$}  {:<13}  {:>12}  {:>16}\n",
            "op", "kind", "params", "flops"
        );
        out += &format!("{}\n", "-".repeat(width + 49));
        for e in &self.entries {
            out += &format!(
                "{:<width$}  {:<13}  {:>12}  {:>16}\n",
                e.name,
                e.kind.name(),
                e.params,
                e.flops
            );
        }
        out += &format!("{}\n", "-".repeat(width + 49));
        out += &format!(
            "{:<width$}  {:<13}  {:>12}  {:>16}\n",
            "total",
            format!("T={}", self.frames),
            self.total_params(),
            self.total_flops()
        );
        out
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Totals of `variant` minus `baseline`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostDiff {
    pub params: i64,
    pub flops: i64,
    pub matmul_flops: i64,
}

pub fn diff(variant: &CostReport, baseline: &CostReport) -> CostDiff {
    let d = |a: u64, b: u64| a as i64 - b as i64;
    CostDiff {
        params: d(variant.total_params(), baseline.total_params()),
        flops: d(variant.total_flops(), baseline.total_flops()),
        matmul_flops: d(
            variant.flops_of(CostKind::Matmul),
            baseline.flops_of(CostKind::Matmul),
        ),
    }
}

struct Plan {
    t: u64,
    entries: Vec<CostEntry>,
}

impl Plan {
    fn push(&mut self, name: String, kind: CostKind, params: u64, flops: u64) {
        self.entries.push(CostEntry {
            name,
            kind,
            params,
            flops,
        });
    }

    /// Per-frame linear layer with bias.
    fn linear(&mut self, name: String, cin: u64, cout: u64) {
        let t = self.t;
        self.push(name, CostKind::Matmul, cin * cout + cout, 2 * t * cin * cout);
    }

    fn norm(&mut self, name: String, c: u64) {
        let t = self.t;
        self.push(name, CostKind::Elementwise, 2 * c, NORM_COST * t * c);
    }

    fn elementwise(&mut self, name: String, per_frame: u64) {
        let t = self.t;
        self.push(name, CostKind::Elementwise, 0, t * per_frame);
    }

    fn shift(&mut self, name: String) {
        self.push(name, CostKind::DataMovement, 0, 0);
    }
}

/// Cost of every op of `cfg` on one sequence of `frames` frames.
pub fn plan(cfg: &ModelConfig, frames: usize) -> Result<CostReport> {
    if frames == 0 {
        return Err(Error::Usage("FLOP count needs at least one frame".into()));
    }
    cfg.validate()?;
    let t = frames as u64;
    let c = cfg.input_channels() as u64;
    let hidden = cfg.hidden_channels() as u64;
    let layers = cfg.num_input_layers as u64;
    let mut p = Plan {
        t,
        entries: Vec::new(),
    };
    p.push(
        "head.layers".into(),
        CostKind::Elementwise,
        layers,
        2 * layers * t * c,
    );
    for i in 0..cfg.blocks {
        let b = format!("blocks.{i}");
        let shift = cfg.block_shift(i);
        let inplace = shift.filter(|s| s.placement == Placement::InPlace).is_some();
        let residual = shift.filter(|s| s.placement == Placement::Residual).is_some();
        match cfg.family {
            Family::Cnn => {
                if inplace || residual {
                    p.shift(format!("{b}.shift"));
                }
                let k = cfg.kernel as u64;
                match cfg.conv {
                    ConvKind::Depthwise => {
                        p.push(format!("{b}.conv"), CostKind::Matmul, k * c + c, 2 * t * k * c)
                    }
                    ConvKind::Full => p.push(
                        format!("{b}.conv"),
                        CostKind::Matmul,
                        k * c * c + c,
                        2 * t * k * c * c,
                    ),
                }
                p.norm(format!("{b}.norm"), c);
                p.linear(format!("{b}.pw1"), c, hidden);
                p.elementwise(format!("{b}.gelu"), GELU_COST * hidden);
                p.linear(format!("{b}.pw2"), hidden, c);
                p.elementwise(format!("{b}.residual"), c);
            }
            Family::Transformer | Family::Shiftformer => {
                if inplace {
                    p.shift(format!("{b}.shift"));
                }
                let mixer = cfg.token_mixer().expect("transformer family");
                if mixer != Mixer::None {
                    if residual {
                        p.shift(format!("{b}.shift"));
                    }
                    p.norm(format!("{b}.norm1"), c);
                    match mixer {
                        Mixer::Attention => {
                            let heads = cfg.heads as u64;
                            for proj in ["q", "k", "v"] {
                                p.linear(format!("{b}.attn.{proj}"), c, c);
                            }
                            match cfg.pos {
                                PositionMode::Relative => p.push(
                                    format!("{b}.attn.pos"),
                                    CostKind::Elementwise,
                                    heads * (2 * cfg.rel_clip as u64 + 1),
                                    heads * t * t,
                                ),
                                PositionMode::Absolute => p.push(
                                    format!("{b}.attn.pos"),
                                    CostKind::Elementwise,
                                    cfg.max_frames as u64 * c,
                                    t * c,
                                ),
                                PositionMode::None => {}
                            }
                            p.push(format!("{b}.attn.scores"), CostKind::Matmul, 0, 2 * t * t * c);
                            p.push(
                                format!("{b}.attn.softmax"),
                                CostKind::Elementwise,
                                0,
                                SOFTMAX_COST * heads * t * t,
                            );
                            p.push(format!("{b}.attn.mix"), CostKind::Matmul, 0, 2 * t * t * c);
                            p.linear(format!("{b}.attn.o"), c, c);
                        }
                        Mixer::Pooling => {
                            p.elementwise(format!("{b}.pool"), (cfg.pool_window as u64 + 1) * c)
                        }
                        Mixer::Shift => p.shift(format!("{b}.mixer_shift")),
                        Mixer::None => unreachable!(),
                    }
                    p.elementwise(format!("{b}.residual1"), c);
                }
                p.norm(format!("{b}.norm2"), c);
                p.linear(format!("{b}.fc1"), c, hidden);
                p.elementwise(format!("{b}.gelu"), GELU_COST * hidden);
                p.linear(format!("{b}.fc2"), hidden, c);
                p.elementwise(format!("{b}.residual2"), c);
            }
            Family::Lstm => {
                if shift.is_some() {
                    p.shift(format!("{b}.shift"));
                }
                let cin = if i == 0 { c } else { cfg.output_channels() as u64 };
                let h = cfg.output_channels() as u64 / 2;
                for dir in ["fwd", "bwd"] {
                    let params = cin * 4 * h + h * 4 * h + 4 * h;
                    p.push(
                        format!("{b}.lstm_{dir}"),
                        CostKind::Matmul,
                        params,
                        2 * t * (cin + h) * 4 * h,
                    );
                    p.elementwise(format!("{b}.lstm_{dir}.cell"), LSTM_CELL_COST * h);
                }
                if residual {
                    p.linear(format!("{b}.shortcut"), cin, 2 * h);
                    p.elementwise(format!("{b}.residual"), 2 * h);
                }
            }
        }
    }
    let out = cfg.output_channels() as u64;
    p.elementwise("head.pool".into(), out);
    let k = cfg.num_classes as u64;
    p.push("head.proj".into(), CostKind::Matmul, out * k + k, 2 * out * k);
    Ok(CostReport {
        frames,
        entries: p.entries,
    })
}

/// Parameter counts read from the model's tensors, grouped by layer.
pub fn count_params<F: Real>(model: &Model<F>) -> CostReport {
    let mut entries: Vec<CostEntry> = Vec::new();
    for p in model.params() {
        let n = p.value.numel() as u64;
        match entries.iter_mut().find(|e| e.name == p.op) {
            Some(e) => e.params += n,
            None => entries.push(CostEntry {
                name: p.op.clone(),
                kind: if p.value.rank() >= 2 { CostKind::Matmul } else { CostKind::Elementwise },
                params: n,
                flops: 0,
            }),
        }
    }
    CostReport { frames: 0, entries }
}

/// Full per-op report of a model at `frames` frames.
pub fn count_flops<F: Real>(model: &Model<F>, frames: usize) -> Result<CostReport> {
    plan(model.config(), frames)
}
