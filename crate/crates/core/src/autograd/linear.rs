use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

impl<F: Real> Graph<F> {
    /// `out[..., j] = Σ_i x[..., i]·w[i, j] + b[j]` for `w: [Cin, Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 || xv.rank() == 0 || xv.last_dim() != wv.shape()[0] {
            return Err(Error::shape(format!(
                "linear: input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.shape() != [cout] {
                return Err(Error::shape(format!(
                    "linear: bias {:?} for {cout} outputs",
                    bv.shape()
                )));
            }
        }
        let rows = xv.numel() / cin;
        let mut out = vec![F::zero(); rows * cout];
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(cout) {
                row.copy_from_slice(bias);
            }
        }
        gemm(rows, cin, cout, xv.data(), Trans::N, wv.data(), Trans::N, &mut out, b.is_some());
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = cout;
        let out = Tensor::new(&shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }
}

pub(super) fn backward<F: Real>(x: Var, w: Var, b: Option<Var>, gout: &[F], sink: &mut GradSink<'_, F>) {
    let xv = sink.value(x);
    let wv = sink.value(w);
    let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
    let rows = xv.numel() / cin;
    if let Some(gx) = sink.slot(x) {
        gemm(rows, cout, cin, gout, Trans::N, wv.data(), Trans::T, gx, true);
    }
    if let Some(gw) = sink.slot(w) {
        gemm(cin, rows, cout, xv.data(), Trans::T, gout, Trans::N, gw, true);
    }
    if let Some(b) = b {
        if let Some(gb) = sink.slot(b) {
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
    fn identity_and_zero_weights() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let eye = g.constant(Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, eye, Some(zero_b)).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 2.0]);

        let zw = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap());
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn mismatched_inner_dims_fail() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 3]));
        let w = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.linear(x, w, None), Err(Error::Shape(_))));
    }
}
