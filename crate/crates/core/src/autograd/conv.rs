//! Same-padded 1-D convolutions over the time axis of `[B,T,C]` tensors.
//! Frames outside `0..T` read as zero.

use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, gemm, Real, Tensor, Trans};

fn check_kernel_len(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config(
            "kernel",
            format!("kernel size must be odd, got {k}"),
        ));
    }
    Ok(())
}

/// Range of output frames `t` for which `t + offset` is a valid input frame.
fn valid_range(frames: usize, offset: isize) -> std::ops::Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (frames as isize - offset).clamp(0, frames as isize) as usize;
    lo.min(hi)..hi
}

impl<F: Real> Graph<F> {
    /// `out[b,t,c] = Σ_k x[b, t+k-(K-1)/2, c]·kernel[k,c] + bias[c]`.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        expect_rank(xv, 3, "depthwise_conv1d input")?;
        expect_rank(kv, 2, "depthwise_conv1d kernel")?;
        let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let klen = kv.shape()[0];
        check_kernel_len(klen)?;
        if kv.shape()[1] != ch {
            return Err(Error::shape(format!(
                "depthwise_conv1d: kernel {:?} for {ch} channels",
                kv.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [ch] {
                return Err(Error::shape("depthwise_conv1d: bias must be [C]"));
            }
        }
        let pad = (klen - 1) / 2;
        let mut out = vec![F::zero(); xv.numel()];
        let (xd, kd) = (xv.data(), kv.data());
        for b in 0..batch {
            for t in 0..frames {
                let orow = &mut out[(b * frames + t) * ch..][..ch];
                if let Some(bias) = bias {
                    orow.copy_from_slice(self.nodes[bias.0].value.data());
                }
                for k in 0..klen {
                    let s = t as isize + k as isize - pad as isize;
                    if s < 0 || s >= frames as isize {
                        continue;
                    }
                    let xrow = &xd[(b * frames + s as usize) * ch..][..ch];
                    let krow = &kd[k * ch..][..ch];
                    for ((o, xi), ki) in orow.iter_mut().zip(xrow).zip(krow) {
                        *o += *xi * *ki;
                    }
                }
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        self.push(out, Op::DepthwiseConv { x, kernel, bias }, &inputs)
    }

    /// Channel-mixing convolution with `kernel: [K, Cin, Cout]`.
    pub fn conv1d_full(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(kernel));
        expect_rank(xv, 3, "conv1d_full input")?;
        expect_rank(kv, 3, "conv1d_full kernel")?;
        let (batch, frames, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (klen, kin, cout) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        check_kernel_len(klen)?;
        if kin != cin {
            return Err(Error::shape(format!(
                "conv1d_full: kernel {:?} for {cin} input channels",
                kv.shape()
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv1d_full: bias must be [Cout]"));
            }
        }
        let pad = (klen - 1) / 2;
        let mut out = vec![F::zero(); batch * frames * cout];
        if let Some(b) = bias {
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bd);
            }
        }
        for k in 0..klen {
            let offset = k as isize - pad as isize;
            let range = valid_range(frames, offset);
            let n = range.len();
            if n == 0 {
                continue;
            }
            let kmat = &kv.data()[k * cin * cout..][..cin * cout];
            for b in 0..batch {
                let src = (b * frames) as isize + range.start as isize + offset;
                let xs = &xv.data()[src as usize * cin..][..n * cin];
                let os = &mut out[(b * frames + range.start) * cout..][..n * cout];
                gemm(n, cin, cout, xs, Trans::N, kmat, Trans::N, os, true);
            }
        }
        let out = Tensor::new(&[batch, frames, cout], out)?;
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        self.push(out, Op::Conv { x, kernel, bias }, &inputs)
    }
}

pub(super) fn depthwise_backward<F: Real>(
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let xv = sink.value(x);
    let kv = sink.value(kernel);
    let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let klen = kv.shape()[0];
    let pad = (klen - 1) / 2;
    let taps = |t: usize| {
        (0..klen).filter_map(move |k| {
            let s = t as isize + k as isize - pad as isize;
            (s >= 0 && s < frames as isize).then_some((k, s as usize))
        })
    };
    if let Some(gx) = sink.slot(x) {
        for b in 0..batch {
            for t in 0..frames {
                let grow = &gout[(b * frames + t) * ch..][..ch];
                for (k, s) in taps(t) {
                    let xrow = &mut gx[(b * frames + s) * ch..][..ch];
                    let krow = &kv.data()[k * ch..][..ch];
                    for ((g, go), ki) in xrow.iter_mut().zip(grow).zip(krow) {
                        *g += *go * *ki;
                    }
                }
            }
        }
    }
    if let Some(gk) = sink.slot(kernel) {
        for b in 0..batch {
            for t in 0..frames {
                let grow = &gout[(b * frames + t) * ch..][..ch];
                for (k, s) in taps(t) {
                    let xrow = &xv.data()[(b * frames + s) * ch..][..ch];
                    let krow = &mut gk[k * ch..][..ch];
                    for ((g, go), xi) in krow.iter_mut().zip(grow).zip(xrow) {
                        *g += *go * *xi;
                    }
                }
            }
        }
    }
    if let Some(bias) = bias {
        if let Some(gb) = sink.slot(bias) {
            for row in gout.chunks_exact(ch) {
                for (g, r) in gb.iter_mut().zip(row) {
                    *g += *r;
                }
            }
        }
    }
}

pub(super) fn full_backward<F: Real>(
    x: Var,
    kernel: Var,
    bias: Option<Var>,
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let xv = sink.value(x);
    let kv = sink.value(kernel);
    let (batch, frames, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let (klen, cout) = (kv.shape()[0], kv.shape()[2]);
    let pad = (klen - 1) / 2;
    let blocks = |k: usize| {
        let offset = k as isize - pad as isize;
        let range = valid_range(frames, offset);
        let (start, n) = (range.start, range.len());
        (0..batch).filter(move |_| n > 0).map(move |b| {
            let src = ((b * frames) as isize + start as isize + offset) as usize;
            (src, b * frames + start, n)
        })
    };
    if let Some(gx) = sink.slot(x) {
        for k in 0..klen {
            let kmat = &kv.data()[k * cin * cout..][..cin * cout];
            for (src, dst, n) in blocks(k) {
                let go = &gout[dst * cout..][..n * cout];
                let gxs = &mut gx[src * cin..][..n * cin];
                gemm(n, cout, cin, go, Trans::N, kmat, Trans::T, gxs, true);
            }
        }
    }
    if let Some(gk) = sink.slot(kernel) {
        for k in 0..klen {
            let gkm = &mut gk[k * cin * cout..][..cin * cout];
            for (src, dst, n) in blocks(k) {
                let xs = &xv.data()[src * cin..][..n * cin];
                let go = &gout[dst * cout..][..n * cout];
                gemm(cin, n, cout, xs, Trans::T, go, Trans::N, gkm, true);
            }
        }
    }
    if let Some(bias) = bias {
        if let Some(gb) = sink.slot(bias) {
            for row in gout.chunks_exact(cout) {
                for (g, r) in gb.iter_mut().zip(row) {
                    *g += *r;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn delta_kernel_is_identity() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let x = g.constant(Tensor::from_f64(&[1, 4, 3], &vals).unwrap());
        let mut k = vec![0.0; 9];
        k[3..6].fill(1.0);
        let kern = g.constant(Tensor::from_f64(&[3, 3], &k).unwrap());
        let y = g.depthwise_conv1d(x, kern, None).unwrap();
        assert_eq!(g.value(y).data(), &vals[..]);
    }

    #[test]
    fn ones_kernel_counts_overlaps() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 4, 1], 1.0));
        let kern = g.constant(Tensor::full(&[3, 1], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.depthwise_conv1d(x, kern, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0, 3.0, 2.0]);
    }

    #[test]
    fn even_kernel_is_config_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 4, 2]));
        let kern = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            g.depthwise_conv1d(x, kern, None),
            Err(Error::Config { .. })
        ));
        let kern = g.constant(Tensor::zeros(&[4, 2, 2]));
        assert!(matches!(g.conv1d_full(x, kern, None), Err(Error::Config { .. })));
    }

    #[test]
    fn full_conv_delta_identity() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..10).map(|i| (i as f64).cos()).collect();
        let x = g.constant(Tensor::from_f64(&[1, 5, 2], &vals).unwrap());
        // K=3, centre tap is the 2×2 identity
        let mut k = vec![0.0; 12];
        k[4] = 1.0;
        k[7] = 1.0;
        let kern = g.constant(Tensor::from_f64(&[3, 2, 2], &k).unwrap());
        let y = g.conv1d_full(x, kern, None).unwrap();
        assert_eq!(g.value(y).data(), &vals[..]);
    }
}
