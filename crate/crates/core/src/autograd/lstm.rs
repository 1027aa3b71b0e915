//! Bidirectional LSTM with hand-written backpropagation through time.
//!
//! Gate layout along the `4H` axis is `[input, forget, cell, output]`.
//! Both directions start from zero state; the backward direction of a
//! sequence starts at its last valid frame.

use super::elementwise::sigmoid_scalar;
use super::{check_lengths, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, gemm, Real, Tensor, Trans};

/// Parameters of one direction: `w_ih: [C, 4H]`, `w_hh: [H, 4H]`, `bias: [4H]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmDirectionParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub bias: Var,
}

struct DirectionTape<F> {
    params: LstmDirectionParams,
    reverse: bool,
    /// Post-activation gates, `[B,T,4H]`.
    acts: Vec<F>,
    cell: Vec<F>,
    hidden: Vec<F>,
}

pub(crate) struct LstmTape<F> {
    x: Var,
    hidden: usize,
    lengths: Vec<usize>,
    dirs: [DirectionTape<F>; 2],
}

/// Frame whose state feeds step `t`, if any.
fn prev_frame(t: usize, len: usize, reverse: bool) -> Option<usize> {
    if reverse {
        (t + 1 < len).then_some(t + 1)
    } else {
        t.checked_sub(1)
    }
}

fn step_order(frames: usize, reverse: bool) -> Box<dyn Iterator<Item = usize>> {
    if reverse {
        Box::new((0..frames).rev())
    } else {
        Box::new(0..frames)
    }
}

impl<F: Real> Graph<F> {
    /// `[B,T,C] -> [B,T,2H]`; forward-direction states fill the first `H` channels.
    pub fn bilstm(
        &mut self,
        x: Var,
        forward: &LstmDirectionParams,
        backward: &LstmDirectionParams,
        lengths: &[usize],
    ) -> Result<Var> {
        let xv = self.value(x);
        expect_rank(xv, 3, "bilstm input")?;
        let (batch, frames, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        check_lengths(lengths, batch, frames)?;
        let hidden = self.value(forward.w_hh).shape()[0];
        for p in [forward, backward] {
            let ok = self.value(p.w_ih).shape() == [cin, 4 * hidden]
                && self.value(p.w_hh).shape() == [hidden, 4 * hidden]
                && self.value(p.bias).shape() == [4 * hidden];
            if !ok {
                return Err(Error::shape(format!(
                    "bilstm: parameters {:?}/{:?}/{:?} do not match input width {cin} and hidden {hidden}",
                    self.value(p.w_ih).shape(),
                    self.value(p.w_hh).shape(),
                    self.value(p.bias).shape()
                )));
            }
        }
        let dirs = [
            self.lstm_direction(x, *forward, false, lengths),
            self.lstm_direction(x, *backward, true, lengths),
        ];
        let mut out = vec![F::zero(); batch * frames * 2 * hidden];
        for (d, tape) in dirs.iter().enumerate() {
            for b in 0..batch {
                for t in 0..lengths[b] {
                    let src = &tape.hidden[(b * frames + t) * hidden..][..hidden];
                    out[(b * frames + t) * 2 * hidden + d * hidden..][..hidden].copy_from_slice(src);
                }
            }
        }
        let out = Tensor::new(&[batch, frames, 2 * hidden], out)?;
        let inputs = [
            x,
            forward.w_ih,
            forward.w_hh,
            forward.bias,
            backward.w_ih,
            backward.w_hh,
            backward.bias,
        ];
        let tape = LstmTape {
            x,
            hidden,
            lengths: lengths.to_vec(),
            dirs,
        };
        self.push(out, Op::BiLstm(Box::new(tape)), &inputs)
    }

    fn lstm_direction(
        &self,
        x: Var,
        params: LstmDirectionParams,
        reverse: bool,
        lengths: &[usize],
    ) -> DirectionTape<F> {
        let xv = self.value(x);
        let (batch, frames, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let w_hh = self.value(params.w_hh);
        let hidden = w_hh.shape()[0];
        let g4 = 4 * hidden;

        let mut acts = vec![F::zero(); batch * frames * g4];
        for row in acts.chunks_exact_mut(g4) {
            row.copy_from_slice(self.value(params.bias).data());
        }
        let w_ih = self.value(params.w_ih).data();
        gemm(batch * frames, cin, g4, xv.data(), Trans::N, w_ih, Trans::N, &mut acts, true);

        let mut cell = vec![F::zero(); batch * frames * hidden];
        let mut hid = vec![F::zero(); batch * frames * hidden];
        let mut h_prev = vec![F::zero(); batch * hidden];
        let mut rec = vec![F::zero(); batch * g4];
        for t in step_order(frames, reverse) {
            for b in 0..batch {
                let dst = &mut h_prev[b * hidden..][..hidden];
                match prev_frame(t, lengths[b], reverse) {
                    Some(p) => dst.copy_from_slice(&hid[(b * frames + p) * hidden..][..hidden]),
                    None => dst.fill(F::zero()),
                }
            }
            gemm(batch, hidden, g4, &h_prev, Trans::N, w_hh.data(), Trans::N, &mut rec, false);
            for b in 0..batch {
                let prev = prev_frame(t, lengths[b], reverse);
                let a = &mut acts[(b * frames + t) * g4..][..g4];
                let r = &rec[b * g4..][..g4];
                for j in 0..hidden {
                    let i_g = sigmoid_scalar(a[j] + r[j]);
                    let f_g = sigmoid_scalar(a[hidden + j] + r[hidden + j]);
                    let c_g = (a[2 * hidden + j] + r[2 * hidden + j]).tanh();
                    let o_g = sigmoid_scalar(a[3 * hidden + j] + r[3 * hidden + j]);
                    a[j] = i_g;
                    a[hidden + j] = f_g;
                    a[2 * hidden + j] = c_g;
                    a[3 * hidden + j] = o_g;
                    let c_prev = prev.map_or(F::zero(), |p| cell[(b * frames + p) * hidden + j]);
                    let c = f_g * c_prev + i_g * c_g;
                    cell[(b * frames + t) * hidden + j] = c;
                    hid[(b * frames + t) * hidden + j] = o_g * c.tanh();
                }
            }
        }
        DirectionTape {
            params,
            reverse,
            acts,
            cell,
            hidden: hid,
        }
    }
}

pub(super) fn backward<F: Real>(tape: &LstmTape<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    let xv = sink.value(tape.x);
    let (batch, frames, cin) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
    let hidden = tape.hidden;
    let g4 = 4 * hidden;
    for (d, dir) in tape.dirs.iter().enumerate() {
        let w_hh = sink.value(dir.params.w_hh).data();
        let w_ih = sink.value(dir.params.w_ih).data();
        let mut dgates = vec![F::zero(); batch * frames * g4];
        let mut dh_rec = vec![F::zero(); batch * hidden];
        let mut dc_rec = vec![F::zero(); batch * hidden];
        let mut step_dg = vec![F::zero(); batch * g4];
        let order: Vec<usize> = step_order(frames, dir.reverse).collect();
        for &t in order.iter().rev() {
            for b in 0..batch {
                let len = tape.lengths[b];
                let prev = prev_frame(t, len, dir.reverse);
                let at = (b * frames + t) * hidden;
                let a = &dir.acts[(b * frames + t) * g4..][..g4];
                let dg = &mut step_dg[b * g4..][..g4];
                for j in 0..hidden {
                    let from_out = if t < len {
                        gout[(b * frames + t) * 2 * hidden + d * hidden + j]
                    } else {
                        F::zero()
                    };
                    let dh = from_out + dh_rec[b * hidden + j];
                    let (i_g, f_g, c_g, o_g) = (a[j], a[hidden + j], a[2 * hidden + j], a[3 * hidden + j]);
                    let c = dir.cell[at + j];
                    let tc = c.tanh();
                    let dc = dh * o_g * (F::one() - tc * tc) + dc_rec[b * hidden + j];
                    let c_prev = prev.map_or(F::zero(), |p| dir.cell[(b * frames + p) * hidden + j]);
                    dg[j] = dc * c_g * i_g * (F::one() - i_g);
                    dg[hidden + j] = dc * c_prev * f_g * (F::one() - f_g);
                    dg[2 * hidden + j] = dc * i_g * (F::one() - c_g * c_g);
                    dg[3 * hidden + j] = dh * tc * o_g * (F::one() - o_g);
                    dc_rec[b * hidden + j] = if prev.is_some() { dc * f_g } else { F::zero() };
                }
                dgates[(b * frames + t) * g4..][..g4].copy_from_slice(dg);
            }
            gemm(batch, g4, hidden, &step_dg, Trans::N, w_hh, Trans::T, &mut dh_rec, false);
            for b in 0..batch {
                if prev_frame(t, tape.lengths[b], dir.reverse).is_none() {
                    dh_rec[b * hidden..][..hidden].fill(F::zero());
                }
            }
        }

        if let Some(gx) = sink.slot(tape.x) {
            gemm(batch * frames, g4, cin, &dgates, Trans::N, w_ih, Trans::T, gx, true);
        }
        if let Some(gw) = sink.slot(dir.params.w_ih) {
            gemm(cin, batch * frames, g4, xv.data(), Trans::T, &dgates, Trans::N, gw, true);
        }
        if let Some(gb) = sink.slot(dir.params.bias) {
            for row in dgates.chunks_exact(g4) {
                for (g, r) in gb.iter_mut().zip(row) {
                    *g += *r;
                }
            }
        }
        if let Some(gw) = sink.slot(dir.params.w_hh) {
            // Σ_t h_prev(t)ᵀ · dgates(t), with zero rows where there is no predecessor.
            let mut h_prev = vec![F::zero(); batch * frames * hidden];
            for b in 0..batch {
                for t in 0..frames {
                    if let Some(p) = prev_frame(t, tape.lengths[b], dir.reverse) {
                        let src = &dir.hidden[(b * frames + p) * hidden..][..hidden];
                        h_prev[(b * frames + t) * hidden..][..hidden].copy_from_slice(src);
                    }
                }
            }
            gemm(hidden, batch * frames, g4, &h_prev, Trans::T, &dgates, Trans::N, gw, true);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dir(g: &mut Graph<f64>, cin: usize, h: usize, seed: u64) -> LstmDirectionParams {
        let val = |i: usize| (((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 1000.0 - 0.5) * 0.8;
        let w_ih = (0..cin * 4 * h).map(val).collect::<Vec<_>>();
        let w_hh = (0..h * 4 * h).map(|i| val(i + 7)).collect::<Vec<_>>();
        let bias = (0..4 * h).map(|i| val(i + 13)).collect::<Vec<_>>();
        LstmDirectionParams {
            w_ih: g.constant(Tensor::from_f64(&[cin, 4 * h], &w_ih).unwrap()),
            w_hh: g.constant(Tensor::from_f64(&[h, 4 * h], &w_hh).unwrap()),
            bias: g.constant(Tensor::from_f64(&[4 * h], &bias).unwrap()),
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 3, 2], 1.5));
        let z = LstmDirectionParams {
            w_ih: g.constant(Tensor::zeros(&[2, 8])),
            w_hh: g.constant(Tensor::zeros(&[2, 8])),
            bias: g.constant(Tensor::zeros(&[8])),
        };
        let y = g.bilstm(x, &z, &z, &[3]).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_directions_agree() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 1, 3], &[0.2, -0.7, 1.1]).unwrap());
        let p = dir(&mut g, 3, 2, 5);
        let y = g.bilstm(x, &p, &p, &[1]).unwrap();
        let out = g.value(y).data();
        assert_eq!(out[..2], out[2..]);
    }

    #[test]
    fn padded_sequence_matches_unpadded() {
        let mut g = Graph::<f64>::new();
        let vals: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).sin()).collect();
        let fwd = dir(&mut g, 2, 3, 1);
        let bwd = dir(&mut g, 2, 3, 2);
        let short = g.constant(Tensor::from_f64(&[1, 3, 2], &vals[..6]).unwrap());
        let y_short = g.bilstm(short, &fwd, &bwd, &[3]).unwrap();
        let mut padded = vals[..6].to_vec();
        padded.extend([9.0, -9.0]);
        let long = g.constant(Tensor::from_f64(&[1, 4, 2], &padded).unwrap());
        let y_long = g.bilstm(long, &fwd, &bwd, &[3]).unwrap();
        assert_eq!(g.value(y_short).data(), &g.value(y_long).data()[..18]);
        assert!(g.value(y_long).data()[18..].iter().all(|v| *v == 0.0));
    }
}
