//! Synthetic order task.
//!
//! Every record carries two Gaussian bumps in time, each on one of two
//! disjoint channel groups (pattern A or B), over Gaussian noise. Classes:
//! `0 = A then B`, `1 = B then A`, `2 = A twice`, `3 = B twice`. Classes 0
//! and 1 only differ in the order of the bumps, so a model that never
//! mixes information across frames cannot tell them apart.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::fseq::{Dataset, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream, StreamRng};

pub const NUM_CLASSES: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    A,
    B,
}

impl Pattern {
    /// Bump order for each class.
    pub fn for_class(class: u32) -> [Pattern; 2] {
        match class {
            0 => [Pattern::A, Pattern::B],
            1 => [Pattern::B, Pattern::A],
            2 => [Pattern::A, Pattern::A],
            _ => [Pattern::B, Pattern::B],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub channels: usize,
    pub frames: usize,
    pub layers: usize,
    pub groups: usize,
    pub per_class_per_group: usize,
    pub noise_std: f64,
    pub amplitude: f64,
    /// Standard deviation of the Gaussian bump, in frames.
    pub bump_width: f64,
    pub min_gap: usize,
    pub group_a_offset: usize,
    pub group_b_offset: usize,
    pub group_width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            channels: 64,
            frames: 50,
            layers: 1,
            groups: 5,
            per_class_per_group: 40,
            noise_std: 1.0,
            amplitude: 3.0,
            bump_width: 5.0,
            min_gap: 10,
            group_a_offset: 0,
            group_b_offset: 8,
            group_width: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let w = self.group_width;
        let (a, b) = (self.group_a_offset, self.group_b_offset);
        if w == 0 {
            return Err(Error::config("group_width", "must be positive"));
        }
        if a + w > self.channels || b + w > self.channels {
            return Err(Error::config(
                "group_b_offset",
                format!("channel groups [{a}, {}) and [{b}, {}) exceed {} channels", a + w, b + w, self.channels),
            ));
        }
        if a < b + w && b < a + w {
            return Err(Error::config(
                "group_b_offset",
                format!("channel groups at {a} and {b} of width {w} overlap"),
            ));
        }
        if self.layers == 0 {
            return Err(Error::config("layers", "must be positive"));
        }
        if self.frames <= self.min_gap {
            return Err(Error::config(
                "frames",
                format!("{} frames leave no room for a gap of {}", self.frames, self.min_gap),
            ));
        }
        if !(self.noise_std >= 0.0 && self.amplitude.is_finite() && self.bump_width > 0.0) {
            return Err(Error::config(
                "noise_std",
                "noise must be non-negative, amplitude finite and bump width positive",
            ));
        }
        if self.groups == 0 {
            return Err(Error::config("groups", "must be positive"));
        }
        Ok(())
    }

    fn offset(&self, p: Pattern) -> usize {
        match p {
            Pattern::A => self.group_a_offset,
            Pattern::B => self.group_b_offset,
        }
    }

    /// Number of admissible `(first, second)` centre pairs.
    pub fn num_center_pairs(&self) -> usize {
        let span = self.frames - self.min_gap;
        span * (span + 1) / 2
    }

    /// The `k`-th pair in lexicographic order of `(first, second)` with
    /// `second - first >= min_gap`.
    pub fn center_pair(&self, mut k: usize) -> (usize, usize) {
        for first in 0..self.frames - self.min_gap {
            let n = self.frames - self.min_gap - first;
            if k < n {
                return (first, first + self.min_gap + k);
            }
            k -= n;
        }
        panic!("center pair index out of range");
    }
}

/// Renders one record with bumps centred at `first < second`.
pub fn render(
    cfg: &SynthConfig,
    class: u32,
    group: u32,
    centers: (usize, usize),
    rng: &mut StreamRng,
) -> FeatureSequence {
    let (t_len, ch) = (cfg.frames, cfg.channels);
    let mut data = vec![0f32; cfg.layers * t_len * ch];
    for v in &mut data {
        let z: f64 = rng.sample(StandardNormal);
        *v = (cfg.noise_std * z) as f32;
    }
    let patterns = Pattern::for_class(class);
    for (pattern, center) in patterns.into_iter().zip([centers.0, centers.1]) {
        let off = cfg.offset(pattern);
        for t in 0..t_len {
            let d = (t as f64 - center as f64) / cfg.bump_width;
            let bump = (cfg.amplitude * (-0.5 * d * d).exp()) as f32;
            for l in 0..cfg.layers {
                let row = (l * t_len + t) * ch + off;
                for v in &mut data[row..row + cfg.group_width] {
                    *v += bump;
                }
            }
        }
    }
    FeatureSequence {
        label: class,
        group,
        layers: cfg.layers,
        frames: t_len,
        channels: ch,
        data,
    }
}

/// Records ordered by group, then class, then index. Record `r` draws from
/// its own substream, so any record can be regenerated alone.
pub fn gen_synthetic(cfg: &SynthConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut records = Vec::with_capacity(cfg.groups * NUM_CLASSES as usize * cfg.per_class_per_group);
    let mut index = 0u64;
    for group in 0..cfg.groups as u32 {
        for class in 0..NUM_CLASSES {
            for _ in 0..cfg.per_class_per_group {
                let mut rng = substream(seed, Stream::Datagen, index);
                let k = rng.random_range(0..cfg.num_center_pairs());
                let centers = cfg.center_pair(k);
                records.push(render(cfg, class, group, centers, &mut rng));
                index += 1;
            }
        }
    }
    Ok(Dataset::new(NUM_CLASSES, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_noise_no_amplitude_is_zero() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            amplitude: 0.0,
            per_class_per_group: 2,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, 3).unwrap();
        assert_eq!(ds.len(), 5 * 4 * 2);
        assert!(ds.records.iter().all(|r| r.data.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn center_pairs_enumerate_all() {
        let cfg = SynthConfig {
            frames: 14,
            ..SynthConfig::default()
        };
        let pairs: Vec<_> = (0..cfg.num_center_pairs()).map(|k| cfg.center_pair(k)).collect();
        let mut expect = Vec::new();
        for a in 0..14 {
            for b in 0..14 {
                if b >= a + 10 {
                    expect.push((a, b));
                }
            }
        }
        assert_eq!(pairs, expect);
    }

    #[test]
    fn invalid_groups_are_config_errors() {
        let overlap = SynthConfig {
            group_b_offset: 4,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_synthetic(&overlap, 0), Err(Error::Config { .. })));
        let outside = SynthConfig {
            channels: 12,
            ..SynthConfig::default()
        };
        assert!(matches!(gen_synthetic(&outside, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn labels_groups_and_counts() {
        let cfg = SynthConfig {
            per_class_per_group: 3,
            frames: 20,
            ..SynthConfig::default()
        };
        let ds = gen_synthetic(&cfg, 1).unwrap();
        assert_eq!(ds.class_counts(), vec![15; 4]);
        assert_eq!(ds.groups(), vec![0, 1, 2, 3, 4]);
    }
}
