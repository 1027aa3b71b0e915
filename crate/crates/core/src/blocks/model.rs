use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::config::{ConvKind, Family, Mixer, ModelConfig, NormKind};
use crate::autograd::{AttentionParams, BatchStats, Graph, LstmDirectionParams, PositionMode, Var};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream, StreamRng};
use crate::shift::{Placement, ShiftAugment, ShiftConfig};
use crate::tensor::{expect_rank, Real, Tensor};

#[derive(Debug, Clone, Copy)]
enum Init {
    /// `U(-b, b)` with `b = 1/sqrt(fan_in)`.
    FanIn(usize),
    Zeros,
    Ones,
    Normal(f64),
}

/// Named trainable tensor. `op` is the layer it belongs to, e.g.
/// `blocks.0.pw1` for `blocks.0.pw1.weight`.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<F: Real> {
    pub name: String,
    pub op: String,
    pub value: Tensor<F>,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<F> {
    pub name: String,
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Forward-pass settings and side outputs.
pub struct Pass<'r> {
    pub training: bool,
    pub augment: Option<(ShiftAugment, &'r mut StreamRng)>,
    /// Batch statistics gathered in training mode, keyed by layer.
    pub bn_updates: Vec<(String, BatchStats<f64>)>,
}

impl<'r> Pass<'r> {
    pub fn eval() -> Self {
        Pass {
            training: false,
            augment: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train() -> Self {
        Pass {
            training: true,
            augment: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn with_augment(mut self, augment: ShiftAugment, rng: &'r mut StreamRng) -> Self {
        self.augment = Some((augment, rng));
        self
    }
}

/// Graph handles for every parameter of a model, in store order.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn get(&self, name: &str) -> Var {
        self.vars[self.index[name]]
    }

    fn try_get(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }
}

/// Sequence classifier: weighted layer sum, block stack, masked mean pool
/// and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<F: Real> {
    cfg: ModelConfig,
    params: Vec<Param<F>>,
    running: Vec<RunningStats<F>>,
}

struct Layout {
    params: Vec<(String, String, Vec<usize>, Init)>,
    running: Vec<(String, usize)>,
}

impl Layout {
    fn add(&mut self, op: &str, leaf: &str, shape: &[usize], init: Init) {
        self.params
            .push((format!("{op}.{leaf}"), op.to_string(), shape.to_vec(), init));
    }

    fn linear(&mut self, op: &str, cin: usize, cout: usize) {
        self.add(op, "weight", &[cin, cout], Init::FanIn(cin));
        self.add(op, "bias", &[cout], Init::FanIn(cin));
    }

    fn norm(&mut self, op: &str, kind: NormKind, ch: usize) {
        self.add(op, "weight", &[ch], Init::Ones);
        self.add(op, "bias", &[ch], Init::Zeros);
        if kind == NormKind::Batch {
            self.running.push((op.to_string(), ch));
        }
    }

    fn build(cfg: &ModelConfig) -> Layout {
        let mut l = Layout {
            params: Vec::new(),
            running: Vec::new(),
        };
        let c = cfg.input_channels();
        l.add("head.layers", "weight", &[cfg.num_input_layers], Init::Zeros);
        for i in 0..cfg.blocks {
            let p = format!("blocks.{i}");
            match cfg.family {
                Family::Cnn => {
                    let k = cfg.kernel;
                    let conv = format!("{p}.conv");
                    match cfg.conv {
                        ConvKind::Depthwise => l.add(&conv, "weight", &[k, c], Init::FanIn(k)),
                        ConvKind::Full => l.add(&conv, "weight", &[k, c, c], Init::FanIn(k * c)),
                    }
                    let fan = if cfg.conv == ConvKind::Depthwise { k } else { k * c };
                    l.add(&conv, "bias", &[c], Init::FanIn(fan));
                    l.norm(&format!("{p}.norm"), cfg.norm, c);
                    l.linear(&format!("{p}.pw1"), c, cfg.hidden_channels());
                    l.linear(&format!("{p}.pw2"), cfg.hidden_channels(), c);
                }
                Family::Transformer | Family::Shiftformer => {
                    let mixer = cfg.token_mixer().expect("transformer family");
                    if mixer != Mixer::None {
                        l.norm(&format!("{p}.norm1"), cfg.norm, c);
                    }
                    if mixer == Mixer::Attention {
                        let a = format!("{p}.attn");
                        for proj in ["q", "k", "v", "o"] {
                            l.linear(&format!("{a}.{proj}"), c, c);
                        }
                        match cfg.pos {
                            PositionMode::Relative => l.add(
                                &format!("{a}.pos"),
                                "rel_bias",
                                &[cfg.heads, 2 * cfg.rel_clip + 1],
                                Init::Zeros,
                            ),
                            PositionMode::Absolute => l.add(
                                &format!("{a}.pos"),
                                "table",
                                &[cfg.max_frames, c],
                                Init::Normal(0.02),
                            ),
                            PositionMode::None => {}
                        }
                    }
                    l.norm(&format!("{p}.norm2"), cfg.norm, c);
                    l.linear(&format!("{p}.fc1"), c, cfg.hidden_channels());
                    l.linear(&format!("{p}.fc2"), cfg.hidden_channels(), c);
                }
                Family::Lstm => {
                    let cin = if i == 0 { c } else { cfg.output_channels() };
                    let h = cfg.output_channels() / 2;
                    for dir in ["fwd", "bwd"] {
                        let op = format!("{p}.lstm_{dir}");
                        l.add(&op, "w_ih", &[cin, 4 * h], Init::FanIn(h));
                        l.add(&op, "w_hh", &[h, 4 * h], Init::FanIn(h));
                        l.add(&op, "bias", &[4 * h], Init::FanIn(h));
                    }
                    if cfg.block_shift(i).map(|s| s.placement) == Some(Placement::Residual) {
                        l.linear(&format!("{p}.shortcut"), cin, 2 * h);
                    }
                }
            }
        }
        l.linear("head.proj", cfg.output_channels(), cfg.num_classes);
        l
    }
}

fn draw(init: Init, n: usize, rng: &mut StreamRng) -> Vec<f64> {
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::FanIn(fan) => {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(rng)).collect()
        }
    }
}

impl<F: Real> Model<F> {
    /// Deterministic initialization: every tensor draws from its own
    /// substream of the `init` stream, indexed by position in the layout.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::build(cfg);
        let params = layout
            .params
            .into_iter()
            .enumerate()
            .map(|(i, (name, op, shape, init))| {
                let mut rng = substream(seed, Stream::Init, i as u64);
                let n = shape.iter().product();
                let value = Tensor::from_f64(&shape, &draw(init, n, &mut rng))?;
                Ok(Param { name, op, value })
            })
            .collect::<Result<Vec<_>>>()?;
        let running = layout
            .running
            .into_iter()
            .map(|(name, ch)| RunningStats {
                name,
                mean: vec![F::zero(); ch],
                var: vec![F::one(); ch],
            })
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            params,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<F>] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<F>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<F>] {
        &mut self.running
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<F>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Zeroes every block parameter, so each residual branch outputs
    /// exactly zero. Head parameters are untouched.
    pub fn zero_block_params(&mut self) {
        for p in &mut self.params {
            if p.name.starts_with("blocks.") {
                p.value.data_mut().fill(F::zero());
            }
        }
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    op: p.op.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|v| G::of(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Puts every parameter on the graph; `trainable` controls whether
    /// gradients are recorded.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        let index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Bound { vars, index }
    }

    /// Handles for parameters already on the graph, in store order.
    pub fn bound_from(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let index = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Bound { vars, index })
    }

    /// `features: [B,L,T,C] -> logits: [B,K]`.
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        features: Var,
        lengths: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let fv = g.value(features);
        expect_rank(fv, 4, "model features")?;
        if fv.shape()[1] != self.cfg.num_input_layers || fv.shape()[3] != self.cfg.input_channels() {
            return Err(Error::shape(format!(
                "features {:?} do not match {} layers x {} channels",
                fv.shape(),
                self.cfg.num_input_layers,
                self.cfg.input_channels()
            )));
        }
        let mut x = g.weighted_layer_sum(features, bound.get("head.layers.weight"))?;
        if let Some((augment, rng)) = pass.augment.as_mut() {
            x = g.shift_augment(x, augment, pass.training, &mut **rng)?;
        }
        let h = self.encode(g, bound, x, lengths, pass)?;
        let pooled = g.mean_pool_time(h, lengths)?;
        g.linear(
            pooled,
            bound.get("head.proj.weight"),
            Some(bound.get("head.proj.bias")),
        )
    }

    /// Block stack only: `[B,T,C] -> [B,T,C_out]`.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        bound: &Bound,
        mut x: Var,
        lengths: &[usize],
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let xv = g.value(x);
        expect_rank(xv, 3, "block input")?;
        if xv.shape()[1] == 0 {
            return Err(Error::EmptyInput("sequence with zero frames".into()));
        }
        let ctx = BlockCtx {
            cfg: &self.cfg,
            bound,
            lengths,
            padded: lengths.iter().any(|&l| l < xv.shape()[1]),
        };
        ctx.check(g, x)?;
        for i in 0..self.cfg.blocks {
            x = match self.cfg.family {
                Family::Cnn => ctx.cnn_block(g, x, i, self, pass)?,
                Family::Transformer | Family::Shiftformer => {
                    ctx.transformer_block(g, x, i, self, pass)?
                }
                Family::Lstm => ctx.lstm_block(g, x, i)?,
            };
        }
        Ok(x)
    }

    /// Detached inference: `features: [B,L,T,C] -> logits: [B,K]`.
    pub fn predict(&self, features: &Tensor<F>, lengths: &[usize]) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.constant(features.clone());
        let logits = self.forward(&mut g, &bound, x, lengths, &mut Pass::eval())?;
        Ok(g.value(logits).clone())
    }

    /// Folds batch statistics into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<f64>)]) {
        let m = self.cfg.bn_momentum;
        for (name, stats) in updates {
            let Some(r) = self.running.iter_mut().find(|r| &r.name == name) else {
                continue;
            };
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count - 1) as f64
            } else {
                1.0
            };
            for c in 0..r.mean.len() {
                let mean = (1.0 - m) * r.mean[c].as_f64() + m * stats.mean[c];
                let var = (1.0 - m) * r.var[c].as_f64() + m * stats.var[c] * unbias;
                r.mean[c] = F::of(mean);
                r.var[c] = F::of(var);
            }
        }
    }
}

struct BlockCtx<'a> {
    cfg: &'a ModelConfig,
    bound: &'a Bound,
    lengths: &'a [usize],
    padded: bool,
}

impl BlockCtx<'_> {
    fn check<F: Real>(&self, g: &Graph<F>, x: Var) -> Result<()> {
        let ch = g.value(x).shape()[2];
        if ch != self.cfg.input_channels() {
            return Err(Error::config(
                "channels",
                format!("input has {ch} channels, model expects {}", self.cfg.input_channels()),
            ));
        }
        Ok(())
    }

    /// Zeroes padded frames so nothing leaks across the sequence end.
    fn masked<F: Real>(&self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        if self.padded {
            g.mask_time(x, self.lengths)
        } else {
            Ok(x)
        }
    }

    /// Shift within each sequence's valid frames: the last valid frame is
    /// a boundary just like the last padded one.
    fn shift<F: Real>(&self, g: &mut Graph<F>, x: Var, cfg: &ShiftConfig) -> Result<Var> {
        let x = self.masked(g, x)?;
        let y = g.temporal_shift(x, cfg)?;
        self.masked(g, y)
    }

    fn norm<F: Real>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        op: &str,
        model: &Model<F>,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let gamma = self.bound.get(&format!("{op}.weight"));
        let beta = self.bound.get(&format!("{op}.bias"));
        match self.cfg.norm {
            NormKind::Layer => g.layer_norm(x, gamma, beta, self.cfg.norm_eps),
            NormKind::Batch => {
                let r = model
                    .running
                    .iter()
                    .find(|r| r.name == op)
                    .ok_or_else(|| Error::shape(format!("missing running stats for {op}")))?;
                let (y, stats) = g.batch_norm1d(
                    x,
                    gamma,
                    beta,
                    (&r.mean, &r.var),
                    self.cfg.norm_eps,
                    pass.training,
                    self.lengths,
                )?;
                if let Some(s) = stats {
                    let stats = BatchStats {
                        mean: s.mean.iter().map(|v| v.as_f64()).collect(),
                        var: s.var.iter().map(|v| v.as_f64()).collect(),
                        count: s.count,
                    };
                    pass.bn_updates.push((op.to_string(), stats));
                }
                Ok(y)
            }
        }
    }

    fn linear<F: Real>(&self, g: &mut Graph<F>, x: Var, op: &str) -> Result<Var> {
        let w = self.bound.get(&format!("{op}.weight"));
        let b = self.bound.get(&format!("{op}.bias"));
        g.linear(x, w, Some(b))
    }

    fn mlp<F: Real>(&self, g: &mut Graph<F>, x: Var, fc1: &str, fc2: &str) -> Result<Var> {
        let h = self.linear(g, x, fc1)?;
        let h = g.gelu(h)?;
        self.linear(g, h, fc2)
    }

    fn cnn_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        mut x: Var,
        i: usize,
        model: &Model<F>,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let p = format!("blocks.{i}");
        let shift = self.cfg.block_shift(i);
        if let Some(s) = shift.filter(|s| s.placement == Placement::InPlace) {
            x = self.shift(g, x, s)?;
        }
        let branch = match shift.filter(|s| s.placement == Placement::Residual) {
            Some(s) => self.shift(g, x, s)?,
            None => self.masked(g, x)?,
        };
        let kernel = self.bound.get(&format!("{p}.conv.weight"));
        let bias = self.bound.get(&format!("{p}.conv.bias"));
        let h = match self.cfg.conv {
            ConvKind::Depthwise => g.depthwise_conv1d(branch, kernel, Some(bias))?,
            ConvKind::Full => g.conv1d_full(branch, kernel, Some(bias))?,
        };
        let h = self.norm(g, h, &format!("{p}.norm"), model, pass)?;
        let h = self.mlp(g, h, &format!("{p}.pw1"), &format!("{p}.pw2"))?;
        g.add(x, h)
    }

    fn transformer_block<F: Real>(
        &self,
        g: &mut Graph<F>,
        mut x: Var,
        i: usize,
        model: &Model<F>,
        pass: &mut Pass<'_>,
    ) -> Result<Var> {
        let p = format!("blocks.{i}");
        let shift = self.cfg.block_shift(i);
        if let Some(s) = shift.filter(|s| s.placement == Placement::InPlace) {
            x = self.shift(g, x, s)?;
        }
        let mixer = self.cfg.token_mixer().expect("transformer family");
        let y = if mixer == Mixer::None {
            x
        } else {
            let branch = match shift.filter(|s| s.placement == Placement::Residual) {
                Some(s) => self.shift(g, x, s)?,
                None => x,
            };
            let h = self.norm(g, branch, &format!("{p}.norm1"), model, pass)?;
            let mixed = match mixer {
                Mixer::Attention => {
                    let a = format!("{p}.attn");
                    let lin = |proj: &str| {
                        (
                            self.bound.get(&format!("{a}.{proj}.weight")),
                            self.bound.get(&format!("{a}.{proj}.bias")),
                        )
                    };
                    let ((wq, bq), (wk, bk), (wv, bv), (wo, bo)) = (lin("q"), lin("k"), lin("v"), lin("o"));
                    let params = AttentionParams {
                        wq,
                        bq,
                        wk,
                        bk,
                        wv,
                        bv,
                        wo,
                        bo,
                        rel_bias: self.bound.try_get(&format!("{a}.pos.rel_bias")),
                        pos_table: self.bound.try_get(&format!("{a}.pos.table")),
                    };
                    g.mhsa(h, &params, self.cfg.heads, self.cfg.rel_clip, self.lengths)?
                }
                Mixer::Pooling => g.avg_pool_mixer(h, self.cfg.pool_window, self.lengths)?,
                Mixer::Shift => {
                    let s = self.cfg.shift.as_ref().expect("validated shift mixer");
                    self.shift(g, h, s)?
                }
                Mixer::None => unreachable!(),
            };
            g.add(x, mixed)?
        };
        let h = self.norm(g, y, &format!("{p}.norm2"), model, pass)?;
        let h = self.mlp(g, h, &format!("{p}.fc1"), &format!("{p}.fc2"))?;
        g.add(y, h)
    }

    fn lstm_block<F: Real>(&self, g: &mut Graph<F>, x: Var, i: usize) -> Result<Var> {
        let p = format!("blocks.{i}");
        let dir = |d: &str| LstmDirectionParams {
            w_ih: self.bound.get(&format!("{p}.lstm_{d}.w_ih")),
            w_hh: self.bound.get(&format!("{p}.lstm_{d}.w_hh")),
            bias: self.bound.get(&format!("{p}.lstm_{d}.bias")),
        };
        let (fwd, bwd) = (dir("fwd"), dir("bwd"));
        match self.cfg.block_shift(i) {
            None => g.bilstm(x, &fwd, &bwd, self.lengths),
            Some(s) => {
                let shifted = self.shift(g, x, s)?;
                let out = g.bilstm(shifted, &fwd, &bwd, self.lengths)?;
                match s.placement {
                    Placement::InPlace => Ok(out),
                    Placement::Residual => {
                        let skip = self.linear(g, x, &format!("{p}.shortcut"))?;
                        g.add(out, skip)
                    }
                }
            }
        }
    }
}

/// Random features for tests and smoke runs: `[B,L,T,C]`, standard normal.
pub fn random_features<F: Real>(shape: [usize; 4], rng: &mut impl Rng) -> Tensor<F> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| F::of(rng.sample::<f64, _>(rand_distr::StandardNormal)))
        .collect();
    Tensor::new(&shape, data).expect("shape matches data")
}
