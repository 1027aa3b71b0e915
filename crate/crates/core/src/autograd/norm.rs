use super::{check_lengths, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Real, Tensor};

pub(crate) struct NormTape<F> {
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<F>,
    rstd: Vec<F>,
    /// Batch norm only: whether statistics came from the batch.
    training: bool,
    /// Batch norm only: rows that contributed to the batch statistics.
    valid_rows: Vec<bool>,
}

/// Per-channel statistics of one training batch (biased variance).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
    /// Number of frames the statistics were computed from.
    pub count: usize,
}

impl<F: Real> Graph<F> {
    fn check_affine(&self, gamma: Var, beta: Var, ch: usize, what: &str) -> Result<()> {
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::shape(format!(
                "{what}: gamma {:?} / beta {:?} for {ch} channels",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok(())
    }

    /// Normalizes every `[.., C]` slice over its channels, then scales and shifts.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let ch = xv.last_dim();
        if xv.rank() == 0 || ch == 0 {
            return Err(Error::shape("layer_norm needs at least one channel"));
        }
        self.check_affine(gamma, beta, ch, "layer_norm")?;
        let eps = F::of(eps);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.numel() / ch;
        let n = F::of(ch as f64);
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * ch..][..ch];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let rs = (var + eps).sqrt().recip();
            rstd[r] = rs;
            for c in 0..ch {
                let h = (row[c] - mean) * rs;
                xhat[r * ch + c] = h;
                out[r * ch + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let tape = NormTape {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            training: true,
            valid_rows: Vec::new(),
        };
        self.push(out, Op::LayerNorm(tape), &[x, gamma, beta])
    }

    /// Per-channel normalization of a `[B,T,C]` tensor.
    ///
    /// In training mode the statistics come from the valid frames of the
    /// batch and are returned so the caller can update its running
    /// estimates. In evaluation mode `running` supplies mean and variance.
    /// Frames past `lengths[b]` output zero.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm1d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (&[F], &[F]),
        eps: f64,
        training: bool,
        lengths: &[usize],
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let xv = self.value(x);
        expect_rank(xv, 3, "batch_norm1d input")?;
        let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        check_lengths(lengths, batch, frames)?;
        self.check_affine(gamma, beta, ch, "batch_norm1d")?;
        if running.0.len() != ch || running.1.len() != ch {
            return Err(Error::shape("batch_norm1d: running stats must be [C]"));
        }
        let eps = F::of(eps);
        let valid_rows: Vec<bool> = (0..batch * frames)
            .map(|r| r % frames < lengths[r / frames])
            .collect();
        let rows = batch * frames;
        let (mean, var, stats) = if training {
            let count = valid_rows.iter().filter(|v| **v).count();
            let n = F::of(count as f64);
            let mut mean = vec![F::zero(); ch];
            for (r, row) in xv.data().chunks_exact(ch).enumerate() {
                if valid_rows[r] {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += *v;
                    }
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![F::zero(); ch];
            for (r, row) in xv.data().chunks_exact(ch).enumerate() {
                if valid_rows[r] {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (*v - *m) * (*v - *m);
                    }
                }
            }
            var.iter_mut().for_each(|s| *s /= n);
            let stats = BatchStats {
                mean: mean.clone(),
                var: var.clone(),
                count,
            };
            (mean, var, Some(stats))
        } else {
            (running.0.to_vec(), running.1.to_vec(), None)
        };
        let rstd: Vec<F> = var.iter().map(|v| (*v + eps).sqrt().recip()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); rows * ch];
        let mut out = vec![F::zero(); rows * ch];
        for (r, row) in xv.data().chunks_exact(ch).enumerate() {
            if !valid_rows[r] {
                continue;
            }
            for c in 0..ch {
                let h = (row[c] - mean[c]) * rstd[c];
                xhat[r * ch + c] = h;
                out[r * ch + c] = h * g[c] + b[c];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let tape = NormTape {
            x,
            gamma,
            beta,
            xhat,
            rstd,
            training,
            valid_rows,
        };
        let v = self.push(out, Op::BatchNorm(tape), &[x, gamma, beta])?;
        Ok((v, stats))
    }
}

fn affine_backward<F: Real>(tape: &NormTape<F>, gout: &[F], ch: usize, sink: &mut GradSink<'_, F>) {
    let valid = |r: usize| tape.valid_rows.get(r).copied().unwrap_or(true);
    if let Some(gg) = sink.slot(tape.gamma) {
        for (grow, hrow) in gout.chunks_exact(ch).zip(tape.xhat.chunks_exact(ch)) {
            for c in 0..ch {
                gg[c] += grow[c] * hrow[c];
            }
        }
    }
    if let Some(gb) = sink.slot(tape.beta) {
        for (r, grow) in gout.chunks_exact(ch).enumerate() {
            if !valid(r) {
                continue;
            }
            for c in 0..ch {
                gb[c] += grow[c];
            }
        }
    }
}

pub(super) fn layer_norm_backward<F: Real>(tape: &NormTape<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    let ch = sink.value(tape.x).last_dim();
    let gamma = sink.value(tape.gamma).data();
    if let Some(gx) = sink.slot(tape.x) {
        let n = F::of(ch as f64);
        let mut dh = vec![F::zero(); ch];
        for (r, (grow, hrow)) in gout.chunks_exact(ch).zip(tape.xhat.chunks_exact(ch)).enumerate() {
            let mut mean_dh = F::zero();
            let mut mean_dh_h = F::zero();
            for c in 0..ch {
                dh[c] = grow[c] * gamma[c];
                mean_dh += dh[c];
                mean_dh_h += dh[c] * hrow[c];
            }
            mean_dh /= n;
            mean_dh_h /= n;
            let rs = tape.rstd[r];
            let gxrow = &mut gx[r * ch..][..ch];
            for c in 0..ch {
                gxrow[c] += rs * (dh[c] - mean_dh - hrow[c] * mean_dh_h);
            }
        }
    }
    affine_backward(tape, gout, ch, sink);
}

pub(super) fn batch_norm_backward<F: Real>(tape: &NormTape<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    let ch = sink.value(tape.x).last_dim();
    let gamma = sink.value(tape.gamma).data();
    if let Some(gx) = sink.slot(tape.x) {
        if tape.training {
            let count = tape.valid_rows.iter().filter(|v| **v).count();
            let n = F::of(count as f64);
            let mut mean_dh = vec![F::zero(); ch];
            let mut mean_dh_h = vec![F::zero(); ch];
            for (r, (grow, hrow)) in gout.chunks_exact(ch).zip(tape.xhat.chunks_exact(ch)).enumerate() {
                if !tape.valid_rows[r] {
                    continue;
                }
                for c in 0..ch {
                    let dh = grow[c] * gamma[c];
                    mean_dh[c] += dh;
                    mean_dh_h[c] += dh * hrow[c];
                }
            }
            for c in 0..ch {
                mean_dh[c] /= n;
                mean_dh_h[c] /= n;
            }
            for (r, (grow, hrow)) in gout.chunks_exact(ch).zip(tape.xhat.chunks_exact(ch)).enumerate() {
                if !tape.valid_rows[r] {
                    continue;
                }
                let gxrow = &mut gx[r * ch..][..ch];
                for c in 0..ch {
                    let dh = grow[c] * gamma[c];
                    gxrow[c] += tape.rstd[c] * (dh - mean_dh[c] - hrow[c] * mean_dh_h[c]);
                }
            }
        } else {
            for (r, grow) in gout.chunks_exact(ch).enumerate() {
                if !tape.valid_rows[r] {
                    continue;
                }
                let gxrow = &mut gx[r * ch..][..ch];
                for c in 0..ch {
                    gxrow[c] += grow[c] * gamma[c] * tape.rstd[c];
                }
            }
        }
    }
    affine_backward(tape, gout, ch, sink);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn affine(g: &mut Graph<f64>, ch: usize) -> (Var, Var) {
        (
            g.constant(Tensor::full(&[ch], 1.0)),
            g.constant(Tensor::zeros(&[ch])),
        )
    }

    #[test]
    fn layer_norm_constant_slice_gives_beta() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 2, 3], 7.0));
        let gamma = g.constant(Tensor::full(&[3], 2.0));
        let beta = g.constant(Tensor::from_f64(&[3], &[0.5, -1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.0, 3.0, 0.5, -1.0, 3.0]);
    }

    #[test]
    fn layer_norm_two_point_case() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 3.0]).unwrap());
        let (gamma, beta) = affine(&mut g, 2);
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        let out = g.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn batch_norm_constant_channel_is_zero_in_training() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..12).map(|i| (i % 3) as f64 * 4.0).collect();
        let x = g.constant(Tensor::from_f64(&[2, 2, 3], &vals).unwrap());
        let (gamma, beta) = affine(&mut g, 3);
        let (rm, rv) = (vec![0.0; 3], vec![1.0; 3]);
        let (y, stats) = g
            .batch_norm1d(x, gamma, beta, (&rm, &rv), 1e-5, true, &[2, 2])
            .unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
        let stats = stats.unwrap();
        assert_eq!(stats.mean, vec![0.0, 4.0, 8.0]);
        assert_eq!(stats.count, 4);
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..6).map(|i| i as f64 - 2.5).collect();
        let x = g.constant(Tensor::from_f64(&[1, 3, 2], &vals).unwrap());
        let (gamma, beta) = affine(&mut g, 2);
        let (rm, rv) = (vec![0.0; 2], vec![1.0; 2]);
        let (y, stats) = g
            .batch_norm1d(x, gamma, beta, (&rm, &rv), 0.0, false, &[3])
            .unwrap();
        assert!(stats.is_none());
        assert_eq!(g.value(y).data(), &vals[..]);
    }

    #[test]
    fn batch_norm_statistics_match_direct_computation() {
        let vals: Vec<f64> = (0..2 * 4 * 3).map(|i| ((i * 37) % 17) as f64 * 0.25 - 1.0).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 4, 3], &vals).unwrap());
        let (gamma, beta) = affine(&mut g, 3);
        let (rm, rv) = (vec![0.0; 3], vec![1.0; 3]);
        let (y, _) = g
            .batch_norm1d(x, gamma, beta, (&rm, &rv), 1e-5, true, &[4, 4])
            .unwrap();
        let out = g.value(y).data();
        for c in 0..3 {
            let col: Vec<f64> = (0..8).map(|r| vals[r * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            for r in 0..8 {
                let expect = (col[r] - mean) / (var + 1e-5).sqrt();
                assert!((out[r * 3 + c] - expect).abs() < 1e-12);
            }
        }
    }
}
