//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] owns every value produced during a forward pass. Each
//! differentiable operation appends one node holding its output and the
//! [`Op`] record needed to propagate gradients. Nodes are appended in
//! execution order, so the node list is already topologically sorted and
//! [`Graph::backward`] is a single reverse sweep.

mod attention;
mod conv;
mod elementwise;
mod linear;
mod loss;
mod lstm;
mod norm;
mod pool;

pub use attention::{AttentionParams, PositionMode};
pub use lstm::LstmDirectionParams;
pub use norm::BatchStats;

use crate::error::{Error, Result};
use crate::shift::ShiftPlan;
use crate::tensor::{Real, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<F> {
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: F },
    Sum { a: Var },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Softmax { a: Var, outer: usize, axis: usize, inner: usize },
    MaskTime { a: Var, lengths: Vec<usize> },
    AddPosition { x: Var, table: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    DepthwiseConv { x: Var, kernel: Var, bias: Option<Var> },
    Conv { x: Var, kernel: Var, bias: Option<Var> },
    LayerNorm(norm::NormTape<F>),
    BatchNorm(norm::NormTape<F>),
    Attention(Box<attention::AttentionTape<F>>),
    PoolMixer { x: Var, window: usize, lengths: Vec<usize> },
    MeanPool { x: Var, lengths: Vec<usize> },
    WeightedLayerSum { x: Var, w: Var, weights: Vec<F> },
    Shift { x: Var, plan: ShiftPlan },
    BiLstm(Box<lstm::LstmTape<F>>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Gelu { .. } => "gelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Softmax { .. } => "softmax",
            Op::MaskTime { .. } => "mask_time",
            Op::AddPosition { .. } => "add_position",
            Op::Linear { .. } => "linear",
            Op::DepthwiseConv { .. } => "depthwise_conv1d",
            Op::Conv { .. } => "conv1d_full",
            Op::LayerNorm(_) => "layer_norm",
            Op::BatchNorm(_) => "batch_norm1d",
            Op::Attention(_) => "attention",
            Op::PoolMixer { .. } => "avg_pool_mixer",
            Op::MeanPool { .. } => "mean_pool_time",
            Op::WeightedLayerSum { .. } => "weighted_layer_sum",
            Op::Shift { .. } => "temporal_shift",
            Op::BiLstm(_) => "bilstm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Option<Op<F>>,
}

/// The tape. Single-threaded; one graph per forward/backward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Mutable view of the gradient slots used by backward rules.
pub(crate) struct GradSink<'a, F: Real> {
    nodes: &'a [Node<F>],
    slots: &'a mut [Option<Vec<F>>],
}

impl<'a, F: Real> GradSink<'a, F> {
    /// Gradient accumulator for `v`, or `None` when `v` does not need one.
    pub(crate) fn slot(&mut self, v: Var) -> Option<&mut [F]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.numel();
        Some(
            self.slots[v.0]
                .get_or_insert_with(|| vec![F::zero(); len])
                .as_mut_slice(),
        )
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor<F> {
        &self.nodes[v.0].value
    }

    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded operations still awaiting a backward sweep.
    pub fn pending_ops(&self) -> usize {
        self.nodes.iter().filter(|n| n.op.is_some()).count()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of the last backward sweep, shaped like the value.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads[v.0].as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape(), g.clone()).expect("grad matches value"))
    }

    /// Borrowed gradient values, without copying.
    pub fn grad_data(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub(crate) fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: requires_grad.then_some(op),
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Propagates `d loss / d v` to every node that requires a gradient.
    ///
    /// Gradients from several uses of one tensor are summed. The tape is
    /// consumed: a second call on the same graph is a usage error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Usage(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        if self.nodes[loss.0].op.is_none() && self.grads.iter().any(Option::is_some) {
            return Err(Error::Usage("tape already consumed by a previous backward".into()));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            let Some(op) = self.nodes[i].op.take() else {
                continue;
            };
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let (before, rest) = self.nodes.split_at(i);
            let out = &rest[0].value;
            let mut sink = GradSink {
                nodes: before,
                slots: &mut self.grads[..i],
            };
            backward_op(&op, out, &gout, &mut sink);
            self.grads[i] = Some(gout);
        }
        // Ops past the loss are unreachable; drop them so the tape is empty.
        for n in &mut self.nodes {
            n.op = None;
        }
        Ok(())
    }
}

fn backward_op<F: Real>(op: &Op<F>, out: &Tensor<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    match op {
        Op::Add { .. }
        | Op::Mul { .. }
        | Op::Scale { .. }
        | Op::Sum { .. }
        | Op::Gelu { .. }
        | Op::Sigmoid { .. }
        | Op::Tanh { .. }
        | Op::Softmax { .. }
        | Op::MaskTime { .. }
        | Op::AddPosition { .. } => elementwise::backward(op, out, gout, sink),
        Op::Linear { x, w, b } => linear::backward(*x, *w, *b, gout, sink),
        Op::DepthwiseConv { x, kernel, bias } => {
            conv::depthwise_backward(*x, *kernel, *bias, gout, sink)
        }
        Op::Conv { x, kernel, bias } => conv::full_backward(*x, *kernel, *bias, gout, sink),
        Op::LayerNorm(tape) => norm::layer_norm_backward(tape, gout, sink),
        Op::BatchNorm(tape) => norm::batch_norm_backward(tape, gout, sink),
        Op::Attention(tape) => attention::backward(tape, gout, sink),
        Op::PoolMixer { x, window, lengths } => pool::mixer_backward(*x, *window, lengths, gout, sink),
        Op::MeanPool { x, lengths } => pool::mean_pool_backward(*x, lengths, gout, sink),
        Op::WeightedLayerSum { x, w, weights } => {
            pool::weighted_sum_backward(*x, *w, weights, out, gout, sink)
        }
        Op::Shift { x, plan } => {
            let frames = sink.value(*x).shape()[1];
            if let Some(gx) = sink.slot(*x) {
                plan.accumulate_transpose(gout, gx, frames);
            }
        }
        Op::BiLstm(tape) => lstm::backward(tape, gout, sink),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => loss::cross_entropy_backward(*logits, labels, probs, gout, sink),
    }
}

/// Validates per-sequence valid lengths against a `[B,T,...]` tensor.
pub(crate) fn check_lengths(lengths: &[usize], batch: usize, frames: usize) -> Result<()> {
    if lengths.len() != batch {
        return Err(Error::shape(format!(
            "{} lengths given for batch of {batch}",
            lengths.len()
        )));
    }
    if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > frames) {
        return Err(Error::shape(format!(
            "sequence length {bad} outside 1..={frames}"
        )));
    }
    Ok(())
}
