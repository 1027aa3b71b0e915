//! Temporal shift: move a fraction of the channels one frame along time.
//!
//! The shifted channels are the lowest `S = floor(alpha·C)` indices. A
//! unidirectional shift moves them from the past into the present
//! (`out[t] = x[t-1]`). A bidirectional shift splits them: the first
//! `ceil(S/2)` move forward as above, the rest move backward
//! (`out[t] = x[t+1]`). Vacated boundary frames are zero. The op is linear,
//! has no parameters and performs no arithmetic.

use std::fmt;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::autograd::{Graph, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{expect_rank, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[serde(alias = "uni")]
    Unidirectional,
    #[serde(alias = "bi")]
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Shift the trunk: the skip path also carries shifted features.
    #[serde(alias = "inplace")]
    InPlace,
    /// Shift only the input of the residual branch.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    #[default]
    ZeroFill,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    /// Fraction of channels that move, in `(0, 1]`.
    #[serde(deserialize_with = "deserialize_alpha")]
    pub alpha: f64,
    pub direction: Direction,
    pub placement: Placement,
    #[serde(default)]
    pub boundary: Boundary,
}

impl ShiftConfig {
    pub fn new(alpha: f64, direction: Direction, placement: Placement) -> Self {
        ShiftConfig {
            alpha,
            direction,
            placement,
            boundary: Boundary::ZeroFill,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::config(
                "shift.alpha",
                format!("must lie in (0, 1], got {}", self.alpha),
            ));
        }
        Ok(())
    }

    /// Number of shifted channels for a width of `channels`.
    pub fn shifted_channels(&self, channels: usize) -> usize {
        (self.alpha * channels as f64 + 1e-9).floor() as usize
    }

    pub fn plan(&self, channels: usize) -> Result<ShiftPlan> {
        ShiftPlan::new(self, channels)
    }
}

/// Parses `0.25` or `1/4`.
pub fn parse_alpha(text: &str) -> Result<f64> {
    let bad = || Error::config("alpha", format!("cannot parse {text:?} as a proportion"));
    let value = match text.split_once('/') {
        Some((num, den)) => {
            let num: f64 = num.trim().parse().map_err(|_| bad())?;
            let den: f64 = den.trim().parse().map_err(|_| bad())?;
            if den == 0.0 {
                return Err(bad());
            }
            num / den
        }
        None => text.trim().parse().map_err(|_| bad())?,
    };
    Ok(value)
}

fn deserialize_alpha<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Number(f64),
        Text(String),
    }
    match Raw::deserialize(de)? {
        Raw::Number(v) => Ok(v),
        Raw::Text(s) => parse_alpha(&s).map_err(serde::de::Error::custom),
    }
}

/// Channel layout of a shift for a fixed width.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftPlan {
    channels: usize,
    forward: Range<usize>,
    backward: Range<usize>,
}

impl ShiftPlan {
    pub fn new(cfg: &ShiftConfig, channels: usize) -> Result<Self> {
        cfg.validate()?;
        let shifted = cfg.shifted_channels(channels);
        if shifted == 0 {
            return Err(Error::config(
                "shift.alpha",
                format!(
                    "alpha = {} shifts no channel out of {channels}",
                    cfg.alpha
                ),
            ));
        }
        let split = match cfg.direction {
            Direction::Unidirectional => shifted,
            Direction::Bidirectional => shifted.div_ceil(2),
        };
        Ok(ShiftPlan {
            channels,
            forward: 0..split,
            backward: split..shifted,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Channels receiving `x[t-1]`.
    pub fn forward_channels(&self) -> Range<usize> {
        self.forward.clone()
    }

    /// Channels receiving `x[t+1]`.
    pub fn backward_channels(&self) -> Range<usize> {
        self.backward.clone()
    }

    pub fn shifted(&self) -> usize {
        self.backward.end
    }

    /// Applies the shift to row-major `[B,T,C]` data.
    pub fn apply<F: Copy + Default>(&self, src: &[F], batch: usize, frames: usize) -> Vec<F> {
        let ch = self.channels;
        debug_assert_eq!(src.len(), batch * frames * ch);
        let mut out = src.to_vec();
        let zero = F::default();
        for b in 0..batch {
            let base = b * frames * ch;
            for t in 0..frames {
                let row = base + t * ch;
                for c in self.forward.clone() {
                    out[row + c] = if t > 0 { src[row - ch + c] } else { zero };
                }
                for c in self.backward.clone() {
                    out[row + c] = if t + 1 < frames { src[row + ch + c] } else { zero };
                }
            }
        }
        out
    }

    /// Adds the transposed shift of `gout` into `gx`. Gradients that the
    /// forward pass dropped at the boundary have no source and vanish.
    pub fn accumulate_transpose<F: Real>(&self, gout: &[F], gx: &mut [F], frames: usize) {
        let ch = self.channels;
        let batch = gout.len() / (frames * ch);
        for b in 0..batch {
            for t in 0..frames {
                let row = (b * frames + t) * ch;
                for c in self.backward.end..ch {
                    gx[row + c] += gout[row + c];
                }
                // out[t] = x[t-1]
                if t > 0 {
                    for c in self.forward.clone() {
                        gx[row - ch + c] += gout[row + c];
                    }
                }
                // out[t] = x[t+1]
                if t + 1 < frames {
                    for c in self.backward.clone() {
                        gx[row + ch + c] += gout[row + c];
                    }
                }
            }
        }
    }
}

impl fmt::Display for ShiftPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} of {} channels shifted (forward {:?}, backward {:?})",
            self.shifted(),
            self.channels,
            self.forward,
            self.backward
        )
    }
}

fn check_input<F: Real>(x: &Tensor<F>) -> Result<(usize, usize, usize)> {
    expect_rank(x, 3, "temporal_shift input")?;
    let (batch, frames, ch) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if frames == 0 {
        return Err(Error::EmptyInput("temporal_shift over zero frames".into()));
    }
    Ok((batch, frames, ch))
}

/// Shift of a detached `[B,T,C]` tensor.
pub fn temporal_shift<F: Real>(x: &Tensor<F>, cfg: &ShiftConfig) -> Result<Tensor<F>> {
    let (batch, frames, ch) = check_input(x)?;
    let plan = cfg.plan(ch)?;
    Tensor::new(x.shape(), plan.apply(x.data(), batch, frames))
}

impl<F: Real> Graph<F> {
    pub fn temporal_shift(&mut self, x: Var, cfg: &ShiftConfig) -> Result<Var> {
        let xv = self.value(x);
        let (batch, frames, ch) = check_input(xv)?;
        let plan = cfg.plan(ch)?;
        let out = Tensor::new(xv.shape(), plan.apply(xv.data(), batch, frames))?;
        self.push(out, Op::Shift { x, plan }, &[x])
    }

    /// Training-time augmentation: with probability `prob` the whole batch is
    /// shifted, otherwise it passes through. Evaluation is always identity.
    pub fn shift_augment<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        augment: &ShiftAugment,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !training || !augment.draw(rng) {
            return Ok(x);
        }
        self.temporal_shift(x, &augment.shift)
    }
}

/// Random temporal shift used as a data augmentation on hidden states.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftAugment {
    pub shift: ShiftConfig,
    pub prob: f64,
}

impl ShiftAugment {
    pub fn new(shift: ShiftConfig, prob: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&prob) {
            return Err(Error::config(
                "augment_prob",
                format!("probability must lie in [0, 1], got {prob}"),
            ));
        }
        shift.validate()?;
        Ok(ShiftAugment { shift, prob })
    }

    /// One Bernoulli(prob) draw. Always consumes exactly one random number.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> bool {
        let u: f64 = rng.random();
        u < self.prob
    }

    pub fn apply<F: Real, R: Rng + ?Sized>(
        &self,
        x: &Tensor<F>,
        training: bool,
        rng: &mut R,
    ) -> Result<Tensor<F>> {
        if training && self.draw(rng) {
            temporal_shift(x, &self.shift)
        } else {
            Ok(x.clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn rows() -> Tensor<f64> {
        let vals: Vec<f64> = (1..=12).map(f64::from).collect();
        Tensor::from_f64(&[1, 3, 4], &vals).unwrap()
    }

    #[test]
    fn unidirectional_half() {
        let cfg = ShiftConfig::new(0.5, Direction::Unidirectional, Placement::InPlace);
        let out = temporal_shift(&rows(), &cfg).unwrap();
        assert_eq!(
            out.data(),
            &[0.0, 0.0, 3.0, 4.0, 1.0, 2.0, 7.0, 8.0, 5.0, 6.0, 11.0, 12.0]
        );
    }

    #[test]
    fn bidirectional_half() {
        let cfg = ShiftConfig::new(0.5, Direction::Bidirectional, Placement::InPlace);
        let out = temporal_shift(&rows(), &cfg).unwrap();
        assert_eq!(
            out.data(),
            &[0.0, 6.0, 3.0, 4.0, 1.0, 10.0, 7.0, 8.0, 5.0, 0.0, 11.0, 12.0]
        );
    }

    #[test]
    fn odd_split_favours_forward_group() {
        let cfg = ShiftConfig::new(3.0 / 8.0, Direction::Bidirectional, Placement::InPlace);
        let plan = cfg.plan(8).unwrap();
        assert_eq!(plan.forward_channels(), 0..2);
        assert_eq!(plan.backward_channels(), 2..3);
    }

    #[test]
    fn sixteenth_of_768_channels() {
        let cfg = ShiftConfig::new(1.0 / 16.0, Direction::Unidirectional, Placement::Residual);
        assert_eq!(cfg.plan(768).unwrap().shifted(), 48);
    }

    #[test]
    fn config_errors() {
        let cfg = ShiftConfig::new(1.0 / 16.0, Direction::Unidirectional, Placement::InPlace);
        assert!(matches!(cfg.plan(8), Err(Error::Config { .. })));
        let cfg = ShiftConfig::new(1.5, Direction::Unidirectional, Placement::InPlace);
        assert!(matches!(cfg.plan(8), Err(Error::Config { .. })));
        let ok = ShiftConfig::new(0.5, Direction::Unidirectional, Placement::InPlace);
        let empty = Tensor::<f64>::zeros(&[1, 0, 4]);
        assert!(matches!(temporal_shift(&empty, &ok), Err(Error::EmptyInput(_))));
        assert!(ShiftAugment::new(ok, 1.2).is_err());
        assert!(ShiftAugment::new(ok, -0.1).is_err());
    }

    #[test]
    fn parse_alpha_forms() {
        assert_eq!(parse_alpha("1/16").unwrap(), 0.0625);
        assert_eq!(parse_alpha("0.25").unwrap(), 0.25);
        assert!(parse_alpha("1/0").is_err());
        assert!(parse_alpha("quarter").is_err());
    }

    #[test]
    fn augment_extremes_and_rate() {
        let cfg = ShiftConfig::new(0.5, Direction::Unidirectional, Placement::InPlace);
        let x = rows();
        let mut rng = substream(7, Stream::Augment, 0);
        let never = ShiftAugment::new(cfg, 0.0).unwrap();
        let always = ShiftAugment::new(cfg, 1.0).unwrap();
        let shifted = temporal_shift(&x, &cfg).unwrap();
        for _ in 0..20 {
            assert_eq!(never.apply(&x, true, &mut rng).unwrap(), x);
            assert_eq!(always.apply(&x, true, &mut rng).unwrap(), shifted);
            assert_eq!(always.apply(&x, false, &mut rng).unwrap(), x);
        }
        let half = ShiftAugment::new(cfg, 0.5).unwrap();
        let mut rng = substream(0, Stream::Augment, 0);
        let hits = (0..10_000).filter(|_| half.draw(&mut rng)).count();
        assert!((hits as f64 / 10_000.0 - 0.5).abs() < 0.02, "rate {hits}");
    }
}
