//! Finite-difference verification of analytic gradients.
//!
//! A differentiable function of several tensors is reduced to a scalar by a
//! fixed random projection of its output, then every (or a sampled subset
//! of) input coordinate is compared against a five-point central difference.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub tol: f64,
    pub max_rel_err: f64,
    /// Input index and flat coordinate of the worst disagreement.
    pub worst: Option<(usize, usize)>,
    pub coords: usize,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    fn record(&mut self, err: f64, input: usize, coord: usize) {
        self.coords += 1;
        if self.worst.is_none() || err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((input, coord));
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    /// Upper bound on coordinates probed per input; `None` probes all.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Inputs whose exact derivative vanishes identically (for example a
    /// key bias under softmax shift invariance). These are compared against
    /// the exact zero instead of a difference quotient of rounding noise.
    pub zero_inputs: Vec<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: DEFAULT_STEP,
            max_coords: None,
            seed: 0,
            zero_inputs: Vec::new(),
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

pub fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Compares the gradient of `f` at `inputs` with finite differences.
pub fn grad_check<Fun>(
    name: &str,
    inputs: &[Tensor<f64>],
    f: Fun,
    tol: f64,
    opts: &CheckOptions,
) -> Result<GradReport>
where
    Fun: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], proj: Option<&Tensor<f64>>| -> Result<(Tensor<f64>, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), proj.is_some())).collect();
        let out = f(&mut g, &vars)?;
        let value = g.value(out).clone();
        let Some(proj) = proj else {
            return Ok((value, Vec::new()));
        };
        let p = g.constant(proj.clone());
        let prod = g.mul(out, p)?;
        let loss = g.sum(prod)?;
        g.backward(loss)?;
        Ok((value, vars.iter().map(|v| g.grad(*v)).collect()))
    };

    let shape = eval(inputs, None)?.0.shape().to_vec();
    let proj = random_tensor(&shape, &mut substream(opts.seed, Stream::Gradcheck, 1));
    let (_, analytic) = eval(inputs, Some(&proj))?;
    let mut pick = substream(opts.seed, Stream::Gradcheck, 2);
    let mut report = GradReport {
        name: name.to_string(),
        tol,
        max_rel_err: 0.0,
        worst: None,
        coords: 0,
    };
    let h = opts.step;
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < n => {
                let mut c = sample(&mut pick, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let exact_zero = opts.zero_inputs.contains(&i);
        for c in coords {
            let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[c]);
            if exact_zero {
                report.record(relative_error(a, 0.0), i, c);
                continue;
            }
            let base = input.data()[c];
            let mut at = |delta: f64| -> Result<Tensor<f64>> {
                probe[i].data_mut()[c] = base + delta;
                Ok(eval(&probe, None)?.0)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h)?, at(h)?, at(-h)?, at(-2.0 * h)?);
            // Stencil per output element first: untouched outputs cancel exactly.
            let numeric = proj
                .data()
                .iter()
                .enumerate()
                .map(|(j, w)| w * (8.0 * (p1.data()[j] - m1.data()[j]) - (p2.data()[j] - m2.data()[j])))
                .sum::<f64>()
                / (12.0 * h);
            probe[i].data_mut()[c] = base;
            report.record(relative_error(a, numeric), i, c);
        }
    }
    Ok(report)
}


/// One entry of the standard suite.
pub struct Case {
    pub name: &'static str,
    pub tol: f64,
    check: fn(u64) -> Result<GradReport>,
}

impl Case {
    pub fn run(&self, seed: u64) -> Result<GradReport> {
        (self.check)(seed)
    }
}

pub const TOL_ELEMENTWISE: f64 = 1e-5;
pub const TOL_COMPOSED: f64 = 1e-4;
pub const TOL_SHIFT: f64 = 1e-6;

mod suite {
    use super::*;
    use crate::autograd::{AttentionParams, LstmDirectionParams};
    use crate::blocks::{ConvKind, Mixer, Model, ModelConfig, NormKind, Pass, Preset};
    use crate::rng::StreamRng;
    use crate::shift::{Direction, Placement, ShiftConfig};

    pub(super) fn inputs(seed: u64, shapes: &[&[usize]]) -> Vec<Tensor<f64>> {
        let mut rng = substream(seed, Stream::Gradcheck, 0);
        shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
    }

    fn opts(seed: u64) -> CheckOptions {
        CheckOptions {
            seed,
            ..CheckOptions::default()
        }
    }

    pub(super) fn unary(
        name: &str,
        seed: u64,
        tol: f64,
        shape: &[usize],
        f: fn(&mut Graph<f64>, Var) -> Result<Var>,
    ) -> Result<GradReport> {
        grad_check(name, &inputs(seed, &[shape]), |g, v| f(g, v[0]), tol, &opts(seed))
    }

    pub(super) fn check(
        name: &str,
        seed: u64,
        tol: f64,
        shapes: &[&[usize]],
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    ) -> Result<GradReport> {
        grad_check(name, &inputs(seed, shapes), f, tol, &opts(seed))
    }

    /// Attention layer check; input 4 is the key bias.
    pub(super) fn check_mhsa(name: &str, seed: u64, table: &[usize], rel: bool) -> Result<GradReport> {
        let shapes: [&[usize]; 10] = [&[2, 4, 4], &[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4], &[4, 4], &[4], table];
        let o = CheckOptions {
            zero_inputs: vec![4],
            ..opts(seed)
        };
        let f = |g: &mut Graph<f64>, v: &[Var]| g.mhsa(v[0], &attention(v, rel), 2, 2, &[4, 2]);
        grad_check(name, &inputs(seed, &shapes), f, TOL_COMPOSED, &o)
    }

    pub(super) fn uni(alpha: f64) -> ShiftConfig {
        ShiftConfig::new(alpha, Direction::Unidirectional, Placement::InPlace)
    }

    pub(super) fn bi(alpha: f64) -> ShiftConfig {
        ShiftConfig::new(alpha, Direction::Bidirectional, Placement::InPlace)
    }

    pub(super) fn attention(v: &[Var], rel: bool) -> AttentionParams {
        AttentionParams {
            wq: v[1],
            bq: v[2],
            wk: v[3],
            bk: v[4],
            wv: v[5],
            bv: v[6],
            wo: v[7],
            bo: v[8],
            rel_bias: rel.then_some(v[9]),
            pos_table: (!rel).then_some(v[9]),
        }
    }

    pub(super) fn lstm_dirs(v: &[Var]) -> (LstmDirectionParams, LstmDirectionParams) {
        (
            LstmDirectionParams {
                w_ih: v[1],
                w_hh: v[2],
                bias: v[3],
            },
            LstmDirectionParams {
                w_ih: v[4],
                w_hh: v[5],
                bias: v[6],
            },
        )
    }

    /// Small model of `preset`'s architecture, with every parameter drawn
    /// at random so no branch starts at an exact zero.
    pub(super) fn small_model(preset: Preset, tweak: fn(&mut ModelConfig)) -> Result<Model<f64>> {
        let mut cfg = ModelConfig::preset(preset).with_width(8);
        cfg.num_input_layers = 2;
        cfg.heads = 2;
        cfg.rel_clip = 2;
        cfg.max_frames = 8;
        cfg.num_classes = 3;
        if let Some(s) = cfg.shift.as_mut() {
            s.alpha = s.alpha.max(0.25);
        }
        tweak(&mut cfg);
        Model::build(&cfg, 0)
    }

    fn randomized(model: &Model<f64>, rng: &mut StreamRng) -> Vec<Tensor<f64>> {
        model
            .params()
            .iter()
            .map(|p| random_tensor(p.value.shape(), rng).map(|v| 0.5 * v))
            .collect()
    }

    /// Gradient check of the block stack (or the whole classifier when
    /// `full`) with respect to the input and all parameters.
    pub(super) fn model_check(name: &str, seed: u64, model: Model<f64>, full: bool) -> Result<GradReport> {
        let mut rng = substream(seed, Stream::Gradcheck, 0);
        let (batch, frames) = (2, 6);
        let lengths = [6, 4];
        let cfg = model.config().clone();
        let x_shape: Vec<usize> = if full {
            vec![batch, cfg.num_input_layers, frames, cfg.input_channels()]
        } else {
            vec![batch, frames, cfg.input_channels()]
        };
        let mut all = vec![random_tensor(&x_shape, &mut rng)];
        all.extend(randomized(&model, &mut rng));
        let labels = [0usize, 2];
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let bound = model.bound_from(v[1..].to_vec())?;
            let mut pass = Pass::train();
            if full {
                let logits = model.forward(g, &bound, v[0], &lengths, &mut pass)?;
                g.cross_entropy(logits, &labels)
            } else {
                model.encode(g, &bound, v[0], &lengths, &mut pass)
            }
        };
        let zero_inputs = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| vanishing_gradient(&cfg, &p.name))
            .map(|(i, _)| i + 1)
            .collect();
        let o = CheckOptions {
            seed,
            max_coords: Some(6),
            zero_inputs,
            ..CheckOptions::default()
        };
        grad_check(name, &all, f, TOL_COMPOSED, &o)
    }

    /// Parameters whose loss derivative is identically zero: key biases
    /// under softmax, conv biases feeding batch norm, and norm offsets
    /// feeding the pooling mixer (which maps constants to zero).
    fn vanishing_gradient(cfg: &ModelConfig, name: &str) -> bool {
        use crate::blocks::Family;
        name.ends_with(".attn.k.bias")
            || (cfg.family == Family::Cnn && cfg.norm == NormKind::Batch && name.ends_with(".conv.bias"))
            || (cfg.token_mixer() == Some(Mixer::Pooling) && name.ends_with(".norm1.bias"))
    }

    pub(super) fn cnn_full_batch(cfg: &mut ModelConfig) {
        cfg.conv = ConvKind::Full;
        cfg.norm = NormKind::Batch;
    }

    pub(super) fn cnn_inplace(cfg: &mut ModelConfig) {
        cfg.shift = Some(ShiftConfig::new(0.25, Direction::Unidirectional, Placement::InPlace));
        cfg.shift_scope = crate::blocks::ShiftScope::All;
    }

    pub(super) fn transformer_absolute(cfg: &mut ModelConfig) {
        cfg.pos = crate::autograd::PositionMode::Absolute;
    }

    pub(super) fn transformer_pooling(cfg: &mut ModelConfig) {
        cfg.mixer = Some(Mixer::Pooling);
        cfg.norm = NormKind::Batch;
    }

    pub(super) fn transformer_residual_shift(cfg: &mut ModelConfig) {
        cfg.shift = Some(ShiftConfig::new(0.25, Direction::Unidirectional, Placement::Residual));
    }

    pub(super) fn lstm_residual(cfg: &mut ModelConfig) {
        cfg.shift = Some(ShiftConfig::new(0.25, Direction::Unidirectional, Placement::Residual));
    }

    pub(super) fn keep(_: &mut ModelConfig) {}
}

macro_rules! case {
    ($name:literal, $tol:expr, $body:expr) => {
        Case {
            name: $name,
            tol: $tol,
            check: $body,
        }
    };
}

/// Every differentiable op and every preset block, at 64-bit precision.
pub fn standard_suite() -> Vec<Case> {
    use crate::blocks::Preset;
    use suite::*;
    const E: f64 = TOL_ELEMENTWISE;
    const C: f64 = TOL_COMPOSED;
    vec![
        case!("add", E, |s| check("add", s, E, &[&[2, 3], &[2, 3]], |g, v| g.add(v[0], v[1]))),
        case!("mul", E, |s| check("mul", s, E, &[&[2, 3], &[2, 3]], |g, v| g.mul(v[0], v[1]))),
        case!("scale", E, |s| unary("scale", s, E, &[2, 3], |g, v| g.scale(v, -1.7))),
        case!("sum", E, |s| unary("sum", s, E, &[2, 3], |g, v| g.sum(v))),
        case!("gelu", E, |s| unary("gelu", s, E, &[3, 4], |g, v| g.gelu(v))),
        case!("sigmoid", E, |s| unary("sigmoid", s, E, &[3, 4], |g, v| g.sigmoid(v))),
        case!("tanh", E, |s| unary("tanh", s, E, &[3, 4], |g, v| g.tanh(v))),
        case!("softmax", E, |s| unary("softmax", s, E, &[2, 4, 3], |g, v| g.softmax(v, 1))),
        case!("mask_time", E, |s| unary("mask_time", s, E, &[2, 4, 3], |g, v| g.mask_time(v, &[4, 2]))),
        case!("add_position", E, |s| check("add_position", s, E, &[&[2, 3, 4], &[5, 4]], |g, v| g
            .add_position(v[0], v[1]))),
        case!("linear", E, |s| check("linear", s, E, &[&[2, 3, 4], &[4, 5], &[5]], |g, v| g
            .linear(v[0], v[1], Some(v[2])))),
        case!("temporal_shift_uni", TOL_SHIFT, |s| unary(
            "temporal_shift_uni",
            s,
            TOL_SHIFT,
            &[2, 5, 8],
            |g, v| g.temporal_shift(v, &uni(0.25))
        )),
        case!("temporal_shift_bi", TOL_SHIFT, |s| unary(
            "temporal_shift_bi",
            s,
            TOL_SHIFT,
            &[2, 5, 8],
            |g, v| g.temporal_shift(v, &bi(0.375))
        )),
        case!("depthwise_conv1d", C, |s| check("depthwise_conv1d", s, C, &[&[2, 6, 3], &[3, 3], &[3]], |g, v| g
            .depthwise_conv1d(v[0], v[1], Some(v[2])))),
        case!("conv1d_full", C, |s| check("conv1d_full", s, C, &[&[2, 6, 3], &[5, 3, 2], &[2]], |g, v| g
            .conv1d_full(v[0], v[1], Some(v[2])))),
        case!("layer_norm", C, |s| check("layer_norm", s, C, &[&[2, 3, 5], &[5], &[5]], |g, v| g
            .layer_norm(v[0], v[1], v[2], 1e-5))),
        case!("batch_norm_train", C, |s| check("batch_norm_train", s, C, &[&[2, 4, 3], &[3], &[3]], |g, v| {
            let (mean, var) = ([0.0; 3], [1.0; 3]);
            Ok(g.batch_norm1d(v[0], v[1], v[2], (&mean, &var), 1e-5, true, &[4, 3])?.0)
        })),
        case!("batch_norm_eval", C, |s| check("batch_norm_eval", s, C, &[&[2, 4, 3], &[3], &[3]], |g, v| {
            let (mean, var) = ([0.1, -0.2, 0.3], [1.5, 0.5, 2.0]);
            Ok(g.batch_norm1d(v[0], v[1], v[2], (&mean, &var), 1e-5, false, &[4, 3])?.0)
        })),
        case!("attention_core", C, |s| check(
            "attention_core",
            s,
            C,
            &[&[2, 4, 4], &[2, 4, 4], &[2, 4, 4], &[2, 5]],
            |g, v| g.attention_core(v[0], v[1], v[2], 2, Some(v[3]), 2, &[4, 3])
        )),
        case!("mhsa_relative", C, |s| check_mhsa("mhsa_relative", s, &[2, 5], true)),
        case!("mhsa_absolute", C, |s| check_mhsa("mhsa_absolute", s, &[6, 4], false)),
        case!("avg_pool_mixer", C, |s| unary("avg_pool_mixer", s, C, &[2, 5, 3], |g, v| g
            .avg_pool_mixer(v, 3, &[5, 3]))),
        case!("mean_pool_time", C, |s| unary("mean_pool_time", s, C, &[2, 5, 3], |g, v| g
            .mean_pool_time(v, &[5, 2]))),
        case!("weighted_layer_sum", C, |s| check("weighted_layer_sum", s, C, &[&[2, 3, 4, 2], &[3]], |g, v| g
            .weighted_layer_sum(v[0], v[1]))),
        case!("bilstm", C, |s| check(
            "bilstm",
            s,
            C,
            &[&[2, 4, 3], &[3, 8], &[2, 8], &[8], &[3, 8], &[2, 8], &[8]],
            |g, v| {
                let (f, b) = lstm_dirs(v);
                g.bilstm(v[0], &f, &b, &[4, 2])
            }
        )),
        case!("cross_entropy", C, |s| unary("cross_entropy", s, C, &[3, 4], |g, v| g
            .cross_entropy(v, &[0, 3, 1]))),
        case!("block_shiftcnn", C, |s| model_check("block_shiftcnn", s, small_model(Preset::ShiftCnn, keep)?, false)),
        case!("block_cnn_inplace", C, |s| model_check(
            "block_cnn_inplace",
            s,
            small_model(Preset::Cnn, cnn_inplace)?,
            false
        )),
        case!("block_cnn_full_conv_bn", C, |s| model_check(
            "block_cnn_full_conv_bn",
            s,
            small_model(Preset::Cnn, cnn_full_batch)?,
            false
        )),
        case!("block_transformer", C, |s| model_check("block_transformer", s, small_model(Preset::Transformer, keep)?, false)),
        case!("block_transformer_ape", C, |s| model_check(
            "block_transformer_ape",
            s,
            small_model(Preset::Transformer, transformer_absolute)?,
            false
        )),
        case!("block_transformer_pooling_bn", C, |s| model_check(
            "block_transformer_pooling_bn",
            s,
            small_model(Preset::Transformer, transformer_pooling)?,
            false
        )),
        case!("block_transformer_residual_shift", C, |s| model_check(
            "block_transformer_residual_shift",
            s,
            small_model(Preset::Transformer, transformer_residual_shift)?,
            false
        )),
        case!("block_shiftformer", C, |s| model_check("block_shiftformer", s, small_model(Preset::Shiftformer, keep)?, false)),
        case!("block_shiftlstm", C, |s| model_check("block_shiftlstm", s, small_model(Preset::ShiftLstm, keep)?, false)),
        case!("block_lstm_residual_shift", C, |s| model_check(
            "block_lstm_residual_shift",
            s,
            small_model(Preset::Lstm, lstm_residual)?,
            false
        )),
        case!("model_shiftcnn", C, |s| model_check("model_shiftcnn", s, small_model(Preset::ShiftCnn, keep)?, true)),
        case!("model_shiftformer", C, |s| model_check("model_shiftformer", s, small_model(Preset::Shiftformer, keep)?, true)),
        case!("model_shiftlstm", C, |s| model_check("model_shiftlstm", s, small_model(Preset::ShiftLstm, keep)?, true)),
        case!("model_transformer", C, |s| model_check("model_transformer", s, small_model(Preset::Transformer, keep)?, true)),
    ]
}

/// Runs every case over `seeds` and keeps the worst report per case.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<GradReport>> {
    standard_suite()
        .iter()
        .map(|case| {
            let mut worst: Option<GradReport> = None;
            for &seed in seeds {
                let r = case.run(seed)?;
                if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
                    worst = Some(r);
                }
            }
            Ok(worst.expect("at least one seed"))
        })
        .collect()
}
