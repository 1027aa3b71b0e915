use super::{check_lengths, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

const GELU_COEF: f64 = 0.044_715;

fn sqrt_2_over_pi<F: Real>() -> F {
    F::of((2.0 / std::f64::consts::PI).sqrt())
}

/// `tanh` through one `exp`; several times faster than the libm routine and
/// saturates cleanly to ±1.
fn tanh_via_exp<F: Real>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

/// Tanh-approximated GELU.
pub fn gelu_scalar<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let inner = sqrt_2_over_pi::<F>() * (x + F::of(GELU_COEF) * x * x * x);
    half * x * (F::one() + tanh_via_exp(inner))
}

pub fn gelu_grad_scalar<F: Real>(x: F) -> F {
    let half = F::of(0.5);
    let c = sqrt_2_over_pi::<F>();
    let k = F::of(GELU_COEF);
    let th = tanh_via_exp(c * (x + k * x * x * x));
    half * (F::one() + th) + half * x * (F::one() - th * th) * c * (F::one() + F::of(3.0) * k * x * x)
}

pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

impl<F: Real> Graph<F> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(va.shape(), data)?;
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let factor = F::of(factor);
        let out = self.value(a).map(|x| x * factor);
        self.push(out, Op::Scale { a, factor }, &[a])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(gelu_scalar);
        self.push(out, Op::Gelu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid_scalar);
        self.push(out, Op::Sigmoid { a }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh { a }, &[a])
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape();
        if axis >= shape.len() {
            return Err(Error::shape(format!("softmax axis {axis} for shape {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![F::zero(); x.numel()];
        let src = x.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[at(k)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for k in 0..len {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            out,
            Op::Softmax {
                a,
                outer,
                axis: len,
                inner,
            },
            &[a],
        )
    }

    /// Zeroes frames `t >= lengths[b]` of a `[B,T,...]` tensor.
    pub fn mask_time(&mut self, a: Var, lengths: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if x.rank() < 2 {
            return Err(Error::shape("mask_time needs a [B,T,...] tensor"));
        }
        let (batch, frames) = (x.shape()[0], x.shape()[1]);
        check_lengths(lengths, batch, frames)?;
        let frame: usize = x.shape()[2..].iter().product();
        let mut data = x.data().to_vec();
        for (b, &len) in lengths.iter().enumerate() {
            let start = (b * frames + len) * frame;
            let end = (b + 1) * frames * frame;
            data[start..end].fill(F::zero());
        }
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            out,
            Op::MaskTime {
                a,
                lengths: lengths.to_vec(),
            },
            &[a],
        )
    }

    /// `x[b,t,:] + table[t,:]` for learned absolute position embeddings.
    pub fn add_position(&mut self, x: Var, table: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(table));
        if xv.rank() != 3 || tv.rank() != 2 || xv.shape()[2] != tv.shape()[1] {
            return Err(Error::shape(format!(
                "add_position: x {:?}, table {:?}",
                xv.shape(),
                tv.shape()
            )));
        }
        let (batch, frames, ch) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        if frames > tv.shape()[0] {
            return Err(Error::shape(format!(
                "add_position: {frames} frames exceed the table's {} positions",
                tv.shape()[0]
            )));
        }
        let mut data = xv.data().to_vec();
        for b in 0..batch {
            let rows = &mut data[b * frames * ch..(b + 1) * frames * ch];
            for (o, p) in rows.iter_mut().zip(&tv.data()[..frames * ch]) {
                *o += *p;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        self.push(out, Op::AddPosition { x, table }, &[x, table])
    }
}

pub(super) fn backward<F: Real>(op: &Op<F>, out: &Tensor<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    match *op {
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(g) = sink.slot(v) {
                    for (gi, go) in g.iter_mut().zip(gout) {
                        *gi += *go;
                    }
                }
            }
        }
        Op::Mul { a, b } => {
            let va = sink.value(a).data();
            let vb = sink.value(b).data();
            if let Some(g) = sink.slot(a) {
                for ((gi, go), y) in g.iter_mut().zip(gout).zip(vb) {
                    *gi += *go * *y;
                }
            }
            if let Some(g) = sink.slot(b) {
                for ((gi, go), x) in g.iter_mut().zip(gout).zip(va) {
                    *gi += *go * *x;
                }
            }
        }
        Op::Scale { a, factor } => {
            if let Some(g) = sink.slot(a) {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += *go * factor;
                }
            }
        }
        Op::Sum { a } => {
            if let Some(g) = sink.slot(a) {
                for gi in g.iter_mut() {
                    *gi += gout[0];
                }
            }
        }
        Op::Gelu { a } => {
            let x = sink.value(a).data();
            if let Some(g) = sink.slot(a) {
                for ((gi, go), xi) in g.iter_mut().zip(gout).zip(x) {
                    *gi += *go * gelu_grad_scalar(*xi);
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(g) = sink.slot(a) {
                for ((gi, go), y) in g.iter_mut().zip(gout).zip(out.data()) {
                    *gi += *go * *y * (F::one() - *y);
                }
            }
        }
        Op::Tanh { a } => {
            if let Some(g) = sink.slot(a) {
                for ((gi, go), y) in g.iter_mut().zip(gout).zip(out.data()) {
                    *gi += *go * (F::one() - *y * *y);
                }
            }
        }
        Op::Softmax {
            a,
            outer,
            axis,
            inner,
        } => {
            let y = out.data();
            if let Some(g) = sink.slot(a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * axis + k) * inner + i;
                        let dot: F = (0..axis).map(|k| gout[at(k)] * y[at(k)]).sum();
                        for k in 0..axis {
                            g[at(k)] += y[at(k)] * (gout[at(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::MaskTime { a, ref lengths } => {
            let shape = sink.value(a).shape().to_vec();
            let frames = shape[1];
            let frame: usize = shape[2..].iter().product();
            if let Some(g) = sink.slot(a) {
                for (b, &len) in lengths.iter().enumerate() {
                    let start = b * frames * frame;
                    let end = start + len * frame;
                    for (gi, go) in g[start..end].iter_mut().zip(&gout[start..end]) {
                        *gi += *go;
                    }
                }
            }
        }
        Op::AddPosition { x, table } => {
            let shape = sink.value(x).shape().to_vec();
            let (batch, frames, ch) = (shape[0], shape[1], shape[2]);
            if let Some(g) = sink.slot(x) {
                for (gi, go) in g.iter_mut().zip(gout) {
                    *gi += *go;
                }
            }
            if let Some(g) = sink.slot(table) {
                for b in 0..batch {
                    let rows = &gout[b * frames * ch..(b + 1) * frames * ch];
                    for (gi, go) in g[..frames * ch].iter_mut().zip(rows) {
                        *gi += *go;
                    }
                }
            }
        }
        _ => unreachable!("not an elementwise op"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-4);
        // independent evaluation of 0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³))) at x = 1
        let c = (2.0f64 / std::f64::consts::PI).sqrt();
        let expect = 0.5 * (1.0 + (c * 1.044715f64).tanh());
        assert!((gelu_scalar(1.0f64) - expect).abs() < 1e-15);
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[4], &[2.0; 4]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_f64(&[3], &[0.0, 1e9, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_matches_direct_formula_on_middle_axis() {
        let vals: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.2).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[2, 3, 4], &vals).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let out = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let denom: f64 = (0..3).map(|k| vals[(o * 3 + k) * 4 + i].exp()).sum();
                for k in 0..3 {
                    let idx = (o * 3 + k) * 4 + i;
                    assert!((out[idx] - vals[idx].exp() / denom).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn mask_time_zeroes_padding() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 3, 1], 1.0));
        let y = g.mask_time(x, &[3, 1]).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(g.mask_time(x, &[0, 1]).is_err());
    }
}
