//! Multi-head scaled dot-product self-attention.

use serde::{Deserialize, Serialize};

use super::{check_lengths, GradSink, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Real, Tensor};

/// How frame order enters the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionMode {
    /// Learned per-head bias indexed by the clipped signed distance `t - s`.
    Relative,
    /// Learned embedding added to the input before the projections.
    Absolute,
    None,
}

/// Graph handles for one attention layer. Projection weights are `[C, C]`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    /// `[heads, 2·clip + 1]`, relative mode only.
    pub rel_bias: Option<Var>,
    /// `[max_frames, C]`, absolute mode only.
    pub pos_table: Option<Var>,
}

pub(crate) struct AttentionTape<F> {
    q: Var,
    k: Var,
    v: Var,
    rel_bias: Option<Var>,
    heads: usize,
    clip: usize,
    lengths: Vec<usize>,
    /// `[B, H, T, T]` attention weights; zero on masked keys.
    probs: Vec<F>,
}

fn rel_index(t: usize, s: usize, clip: usize) -> usize {
    let d = (t as isize - s as isize).clamp(-(clip as isize), clip as isize);
    (d + clip as isize) as usize
}

impl<F: Real> Graph<F> {
    /// `softmax(q kᵀ/√d + bias) v` per head, with keys `s >= lengths[b]` masked.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        rel_bias: Option<Var>,
        clip: usize,
        lengths: &[usize],
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        expect_rank(qv, 3, "attention query")?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape("attention: q, k, v shapes differ"));
        }
        let (batch, frames, ch) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || ch % heads != 0 {
            return Err(Error::config(
                "heads",
                format!("{ch} channels are not divisible by {heads} heads"),
            ));
        }
        check_lengths(lengths, batch, frames)?;
        if let Some(rb) = rel_bias {
            if self.value(rb).shape() != [heads, 2 * clip + 1] {
                return Err(Error::shape(format!(
                    "attention: relative bias {:?}, expected [{heads}, {}]",
                    self.value(rb).shape(),
                    2 * clip + 1
                )));
            }
        }
        let d = ch / heads;
        let scale = F::of(1.0 / (d as f64).sqrt());
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let bias = rel_bias.map(|rb| self.value(rb).data());
        let mut probs = vec![F::zero(); batch * heads * frames * frames];
        let mut out = vec![F::zero(); batch * frames * ch];
        for b in 0..batch {
            let len = lengths[b];
            for h in 0..heads {
                for t in 0..frames {
                    let p = &mut probs[((b * heads + h) * frames + t) * frames..][..frames];
                    let qrow = &qd[(b * frames + t) * ch + h * d..][..d];
                    let mut max = F::neg_infinity();
                    for s in 0..len {
                        let krow = &kd[(b * frames + s) * ch + h * d..][..d];
                        let mut score = qrow.iter().zip(krow).map(|(a, c)| *a * *c).sum::<F>() * scale;
                        if let Some(bias) = bias {
                            score += bias[h * (2 * clip + 1) + rel_index(t, s, clip)];
                        }
                        p[s] = score;
                        max = max.max(score);
                    }
                    let mut total = F::zero();
                    for ps in &mut p[..len] {
                        *ps = (*ps - max).exp();
                        total += *ps;
                    }
                    let orow = &mut out[(b * frames + t) * ch + h * d..][..d];
                    for s in 0..len {
                        p[s] /= total;
                        let vrow = &vd[(b * frames + s) * ch + h * d..][..d];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += p[s] * *x;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[batch, frames, ch], out)?;
        let tape = AttentionTape {
            q,
            k,
            v,
            rel_bias,
            heads,
            clip,
            lengths: lengths.to_vec(),
            probs,
        };
        let inputs: Vec<Var> = [Some(q), Some(k), Some(v), rel_bias].into_iter().flatten().collect();
        self.push(out, Op::Attention(Box::new(tape)), &inputs)
    }

    /// Full multi-head self-attention layer: optional absolute positions,
    /// Q/K/V projections, attention core and output projection.
    pub fn mhsa(
        &mut self,
        x: Var,
        p: &AttentionParams,
        heads: usize,
        clip: usize,
        lengths: &[usize],
    ) -> Result<Var> {
        let ch = self.value(x).last_dim();
        if heads == 0 || !ch.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("{ch} channels are not divisible by {heads} heads"),
            ));
        }
        let x = match p.pos_table {
            Some(table) => self.add_position(x, table)?,
            None => x,
        };
        let q = self.linear(x, p.wq, Some(p.bq))?;
        let k = self.linear(x, p.wk, Some(p.bk))?;
        let v = self.linear(x, p.wv, Some(p.bv))?;
        let a = self.attention_core(q, k, v, heads, p.rel_bias, clip, lengths)?;
        self.linear(a, p.wo, Some(p.bo))
    }
}

pub(super) fn backward<F: Real>(tape: &AttentionTape<F>, gout: &[F], sink: &mut GradSink<'_, F>) {
    let qv = sink.value(tape.q);
    let (batch, frames, ch) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
    let heads = tape.heads;
    let clip = tape.clip;
    let d = ch / heads;
    let scale = F::of(1.0 / (d as f64).sqrt());
    let qd = qv.data();
    let kd = sink.value(tape.k).data();
    let vd = sink.value(tape.v).data();

    // Score gradients first; every input gradient derives from them.
    let mut dscore = vec![F::zero(); tape.probs.len()];
    let mut dp = vec![F::zero(); frames];
    for b in 0..batch {
        let len = tape.lengths[b];
        for h in 0..heads {
            for t in 0..frames {
                let base = ((b * heads + h) * frames + t) * frames;
                let p = &tape.probs[base..][..frames];
                let grow = &gout[(b * frames + t) * ch + h * d..][..d];
                let mut dot = F::zero();
                for s in 0..len {
                    let vrow = &vd[(b * frames + s) * ch + h * d..][..d];
                    dp[s] = grow.iter().zip(vrow).map(|(a, c)| *a * *c).sum();
                    dot += p[s] * dp[s];
                }
                for s in 0..len {
                    dscore[base + s] = p[s] * (dp[s] - dot);
                }
            }
        }
    }

    let for_each_pair = |f: &mut dyn FnMut(usize, usize, usize, usize, F)| {
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..frames {
                    let base = ((b * heads + h) * frames + t) * frames;
                    for s in 0..tape.lengths[b] {
                        f(b, h, t, s, dscore[base + s]);
                    }
                }
            }
        }
    };

    if let Some(gq) = sink.slot(tape.q) {
        for_each_pair(&mut |b, h, t, s, ds| {
            let krow = &kd[(b * frames + s) * ch + h * d..][..d];
            let g = &mut gq[(b * frames + t) * ch + h * d..][..d];
            for (gi, ki) in g.iter_mut().zip(krow) {
                *gi += ds * scale * *ki;
            }
        });
    }
    if let Some(gk) = sink.slot(tape.k) {
        for_each_pair(&mut |b, h, t, s, ds| {
            let qrow = &qd[(b * frames + t) * ch + h * d..][..d];
            let g = &mut gk[(b * frames + s) * ch + h * d..][..d];
            for (gi, qi) in g.iter_mut().zip(qrow) {
                *gi += ds * scale * *qi;
            }
        });
    }
    if let Some(gv) = sink.slot(tape.v) {
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..frames {
                    let p = &tape.probs[((b * heads + h) * frames + t) * frames..][..frames];
                    let grow = &gout[(b * frames + t) * ch + h * d..][..d];
                    for s in 0..tape.lengths[b] {
                        let g = &mut gv[(b * frames + s) * ch + h * d..][..d];
                        for (gi, go) in g.iter_mut().zip(grow) {
                            *gi += p[s] * *go;
                        }
                    }
                }
            }
        }
    }
    if let Some(rb) = tape.rel_bias {
        if let Some(gb) = sink.slot(rb) {
            for_each_pair(&mut |_, h, t, s, ds| {
                gb[h * (2 * clip + 1) + rel_index(t, s, clip)] += ds;
            });
        }
    }
}
