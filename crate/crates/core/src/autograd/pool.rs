use super::{check_lengths, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Real, Tensor};

/// Valid frames of the pooling window centred on `t`.
fn window_span(t: usize, half: usize, len: usize) -> std::ops::Range<usize> {
    t.saturating_sub(half)..(t + half + 1).min(len)
}

impl<F: Real> Graph<F> {
    /// Token mixer: temporal average over `window` frames minus the input.
    ///
    /// The average only counts frames inside the sequence, so constant
    /// sequences map to zero everywhere. Frames past `lengths[b]` output zero.
    pub fn avg_pool_mixer(&mut self, x: Var, window: usize, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 3, "avg_pool_mixer input")?;
        if window == 0 || window.is_multiple_of(2) {
            return Err(Error::config(
                "pool_window",
                format!("window must be odd, got {window}"),
            ));
        }
        let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        check_lengths(lengths, batch, frames)?;
        let half = window / 2;
        let xd = xv.data();
        let mut out = vec![F::zero(); xv.numel()];
        for b in 0..batch {
            let len = lengths[b];
            for t in 0..len {
                let span = window_span(t, half, len);
                let inv = F::of(1.0 / span.len() as f64);
                let orow = &mut out[(b * frames + t) * ch..][..ch];
                for s in span {
                    let xrow = &xd[(b * frames + s) * ch..][..ch];
                    for (o, v) in orow.iter_mut().zip(xrow) {
                        *o += *v * inv;
                    }
                }
                let xrow = &xd[(b * frames + t) * ch..][..ch];
                for (o, v) in orow.iter_mut().zip(xrow) {
                    *o -= *v;
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let op = Op::PoolMixer {
            x,
            window,
            lengths: lengths.to_vec(),
        };
        self.push(out, op, &[x])
    }

    /// `[B,T,C] -> [B,C]` average over the first `lengths[b]` frames.
    pub fn mean_pool_time(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 3, "mean_pool_time input")?;
        let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        check_lengths(lengths, batch, frames)?;
        let mut out = vec![F::zero(); batch * ch];
        for b in 0..batch {
            let inv = F::of(1.0 / lengths[b] as f64);
            let orow = &mut out[b * ch..][..ch];
            for t in 0..lengths[b] {
                for (o, v) in orow.iter_mut().zip(&xv.data()[(b * frames + t) * ch..][..ch]) {
                    *o += *v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let out = Tensor::new(&[batch, ch], out)?;
        let op = Op::MeanPool {
            x,
            lengths: lengths.to_vec(),
        };
        self.push(out, op, &[x])
    }

    /// `out = Σ_l softmax(w)[l] · x[:, l]` for `x: [B,L,T,C]`, `w: [L]`.
    pub fn weighted_layer_sum(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        expect_rank(xv, 4, "weighted_layer_sum input")?;
        let (batch, layers, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        if wv.shape() != [layers] {
            return Err(Error::shape(format!(
                "weighted_layer_sum: weights {:?} for {layers} layers",
                wv.shape()
            )));
        }
        let max = wv.data().iter().copied().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = wv.data().iter().map(|v| (*v - max).exp()).collect();
        let total: F = exps.iter().copied().sum();
        let weights: Vec<F> = exps.iter().map(|e| *e / total).collect();
        let plane = frames * ch;
        let mut out = vec![F::zero(); batch * plane];
        for b in 0..batch {
            let orow = &mut out[b * plane..][..plane];
            for (l, a) in weights.iter().enumerate() {
                let src = &xv.data()[(b * layers + l) * plane..][..plane];
                for (o, v) in orow.iter_mut().zip(src) {
                    *o += *a * *v;
                }
            }
        }
        let out = Tensor::new(&[batch, frames, ch], out)?;
        self.push(out, Op::WeightedLayerSum { x, w, weights }, &[x, w])
    }
}

pub(super) fn mixer_backward<F: Real>(
    x: Var,
    window: usize,
    lengths: &[usize],
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let shape = sink.value(x).shape().to_vec();
    let (frames, ch) = (shape[1], shape[2]);
    let half = window / 2;
    let Some(gx) = sink.slot(x) else { return };
    for (b, &len) in lengths.iter().enumerate() {
        for t in 0..len {
            let span = window_span(t, half, len);
            let inv = F::of(1.0 / span.len() as f64);
            let grow = &gout[(b * frames + t) * ch..][..ch];
            for s in span {
                let g = &mut gx[(b * frames + s) * ch..][..ch];
                for (gi, go) in g.iter_mut().zip(grow) {
                    *gi += *go * inv;
                }
            }
            let g = &mut gx[(b * frames + t) * ch..][..ch];
            for (gi, go) in g.iter_mut().zip(grow) {
                *gi -= *go;
            }
        }
    }
}

pub(super) fn mean_pool_backward<F: Real>(
    x: Var,
    lengths: &[usize],
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let shape = sink.value(x).shape().to_vec();
    let (frames, ch) = (shape[1], shape[2]);
    let Some(gx) = sink.slot(x) else { return };
    for (b, &len) in lengths.iter().enumerate() {
        let inv = F::of(1.0 / len as f64);
        let grow = &gout[b * ch..][..ch];
        for t in 0..len {
            let g = &mut gx[(b * frames + t) * ch..][..ch];
            for (gi, go) in g.iter_mut().zip(grow) {
                *gi += *go * inv;
            }
        }
    }
}

pub(super) fn weighted_sum_backward<F: Real>(
    x: Var,
    w: Var,
    weights: &[F],
    out: &Tensor<F>,
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let xv = sink.value(x);
    let (batch, layers) = (xv.shape()[0], xv.shape()[1]);
    let plane = out.numel() / batch;
    let xd = xv.data();
    if let Some(gx) = sink.slot(x) {
        for b in 0..batch {
            let grow = &gout[b * plane..][..plane];
            for (l, a) in weights.iter().enumerate() {
                let g = &mut gx[(b * layers + l) * plane..][..plane];
                for (gi, go) in g.iter_mut().zip(grow) {
                    *gi += *a * *go;
                }
            }
        }
    }
    if sink.wants(w) {
        let mut da = vec![F::zero(); layers];
        for b in 0..batch {
            let grow = &gout[b * plane..][..plane];
            for (l, d) in da.iter_mut().enumerate() {
                let src = &xd[(b * layers + l) * plane..][..plane];
                *d += grow.iter().zip(src).map(|(g, v)| *g * *v).sum::<F>();
            }
        }
        let dot: F = weights.iter().zip(&da).map(|(a, d)| *a * *d).sum();
        if let Some(gw) = sink.slot(w) {
            for l in 0..layers {
                gw[l] += weights[l] * (da[l] - dot);
            }
        }
    }
}
