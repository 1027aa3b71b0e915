use super::{GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Real, Tensor};

impl<F: Real> Graph<F> {
    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        expect_rank(lv, 2, "cross_entropy logits")?;
        let (batch, classes) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != batch {
            return Err(Error::shape(format!(
                "cross_entropy: {} labels for batch of {batch}",
                labels.len()
            )));
        }
        if batch == 0 {
            return Err(Error::EmptyInput("cross_entropy over an empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::shape(format!("label {bad} out of range for {classes} classes")));
        }
        let mut probs = vec![F::zero(); batch * classes];
        let mut loss = F::zero();
        for (b, row) in lv.data().chunks_exact(classes).enumerate() {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|v| (*v - max).exp()).sum::<F>().ln() + max;
            loss += lse - row[labels[b]];
            for (p, v) in probs[b * classes..][..classes].iter_mut().zip(row) {
                *p = (*v - lse).exp();
            }
        }
        loss /= F::of(batch as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }
}

pub(super) fn cross_entropy_backward<F: Real>(
    logits: Var,
    labels: &[usize],
    probs: &[F],
    gout: &[F],
    sink: &mut GradSink<'_, F>,
) {
    let Some(g) = sink.slot(logits) else { return };
    let batch = labels.len();
    let classes = probs.len() / batch;
    let scale = gout[0] / F::of(batch as f64);
    for b in 0..batch {
        for k in 0..classes {
            let onehot = if k == labels[b] { F::one() } else { F::zero() };
            g[b * classes + k] += (probs[b * classes + k] - onehot) * scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3, 4]));
        let l = g.cross_entropy(x, &[0, 1, 3]).unwrap();
        assert!((g.value(l).data()[0] - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logit_gives_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.0, 1e9, 0.0]).unwrap());
        let l = g.cross_entropy(x, &[1]).unwrap();
        assert!(g.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn gradient_is_softmax_minus_onehot_over_batch() {
        let mut g = Graph::<f64>::new();
        let vals = [0.3, -1.2, 2.0, 0.0, 0.5, 0.5];
        let x = g.param(Tensor::from_f64(&[2, 3], &vals).unwrap());
        let l = g.cross_entropy(x, &[2, 0]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        for b in 0..2 {
            let row = &vals[b * 3..][..3];
            let z: f64 = row.iter().map(|v: &f64| v.exp()).sum();
            for k in 0..3 {
                let onehot = if k == [2, 0][b] { 1.0 } else { 0.0 };
                let expect = (row[k].exp() / z - onehot) / 2.0;
                assert!((grad.data()[b * 3 + k] - expect).abs() < 1e-12);
            }
        }
    }
}
