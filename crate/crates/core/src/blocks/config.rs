use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::PositionMode;
use crate::error::{Error, Result};
use crate::shift::{Direction, Placement, ShiftConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cnn,
    Transformer,
    Shiftformer,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Layer,
    Batch,
}

/// Token mixer of a transformer-family block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixer {
    Attention,
    Pooling,
    Shift,
    /// No token mixing at all: a per-frame MLP.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    #[default]
    Depthwise,
    Full,
}

/// Which blocks host the shift.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftScope {
    #[default]
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    ShiftCnn,
    Cnn,
    Shiftformer,
    Transformer,
    ShiftLstm,
    Lstm,
}

impl Preset {
    pub const ALL: [Preset; 6] = [
        Preset::ShiftCnn,
        Preset::Cnn,
        Preset::Shiftformer,
        Preset::Transformer,
        Preset::ShiftLstm,
        Preset::Lstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ShiftCnn => "shiftcnn",
            Preset::Cnn => "cnn",
            Preset::Shiftformer => "shiftformer",
            Preset::Transformer => "transformer",
            Preset::ShiftLstm => "shiftlstm",
            Preset::Lstm => "lstm",
        }
    }

    /// The same architecture without any temporal shift.
    pub fn baseline(self) -> Preset {
        match self {
            Preset::ShiftCnn | Preset::Cnn => Preset::Cnn,
            Preset::Shiftformer | Preset::Transformer => Preset::Transformer,
            Preset::ShiftLstm | Preset::Lstm => Preset::Lstm,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config("preset", format!("unknown preset {s:?}")))
    }
}

fn default_kernel() -> usize {
    7
}
fn default_heads() -> usize {
    8
}
fn default_pos() -> PositionMode {
    PositionMode::Relative
}
fn default_classes() -> usize {
    4
}
fn default_layers() -> usize {
    13
}
fn default_clip() -> usize {
    64
}
fn default_max_frames() -> usize {
    1024
}
fn default_window() -> usize {
    3
}
fn default_eps() -> f64 {
    1e-5
}
fn default_momentum() -> f64 {
    0.1
}

/// Architecture description. `channels` is `(C, hidden, C)` for the
/// convolutional and transformer families and `(C, 2H)` for the LSTM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub channels: Vec<usize>,
    pub blocks: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_pos")]
    pub pos: PositionMode,
    /// Transformer family only; defaults to attention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mixer: Option<Mixer>,
    #[serde(default)]
    pub conv: ConvKind,
    /// For the shiftformer family this is the token mixer and its placement
    /// is unused.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<ShiftConfig>,
    #[serde(default)]
    pub shift_scope: ShiftScope,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_layers")]
    pub num_input_layers: usize,
    #[serde(default = "default_clip")]
    pub rel_clip: usize,
    /// Longest sequence supported by absolute position embeddings.
    #[serde(default = "default_max_frames")]
    pub max_frames: usize,
    #[serde(default = "default_window")]
    pub pool_window: usize,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default = "default_momentum")]
    pub bn_momentum: f64,
}

impl ModelConfig {
    fn base(family: Family, channels: Vec<usize>, blocks: usize) -> Self {
        ModelConfig {
            family,
            channels,
            blocks,
            kernel: default_kernel(),
            heads: default_heads(),
            norm: NormKind::Layer,
            pos: default_pos(),
            mixer: None,
            conv: ConvKind::Depthwise,
            shift: None,
            shift_scope: ShiftScope::All,
            num_classes: default_classes(),
            num_input_layers: default_layers(),
            rel_clip: default_clip(),
            max_frames: default_max_frames(),
            pool_window: default_window(),
            norm_eps: default_eps(),
            bn_momentum: default_momentum(),
        }
    }

    pub fn preset(preset: Preset) -> Self {
        let wide = vec![768, 3072, 768];
        match preset {
            Preset::ShiftCnn => ModelConfig {
                shift: Some(ShiftConfig::new(
                    1.0 / 16.0,
                    Direction::Unidirectional,
                    Placement::Residual,
                )),
                shift_scope: ShiftScope::Last,
                ..Self::base(Family::Cnn, wide, 2)
            },
            Preset::Cnn => Self::base(Family::Cnn, wide, 2),
            Preset::Shiftformer => ModelConfig {
                shift: Some(ShiftConfig::new(
                    0.25,
                    Direction::Bidirectional,
                    Placement::Residual,
                )),
                ..Self::base(Family::Shiftformer, wide, 2)
            },
            Preset::Transformer => Self::base(Family::Transformer, wide, 2),
            Preset::ShiftLstm => ModelConfig {
                shift: Some(ShiftConfig::new(
                    0.25,
                    Direction::Unidirectional,
                    Placement::InPlace,
                )),
                ..Self::base(Family::Lstm, vec![768, 1536], 1)
            },
            Preset::Lstm => Self::base(Family::Lstm, vec![768, 1536], 1),
        }
    }

    /// Rescales the widths to `width` input channels keeping the ratios:
    /// `(w, 4w, w)` or `(w, 2w)`.
    pub fn with_width(mut self, width: usize) -> Self {
        self.channels = match self.family {
            Family::Lstm => vec![width, 2 * width],
            _ => vec![width, 4 * width, width],
        };
        self
    }

    /// The same architecture with every temporal shift removed; a shift
    /// token mixer falls back to attention.
    pub fn baseline(&self) -> ModelConfig {
        let family = match self.family {
            Family::Shiftformer => Family::Transformer,
            f => f,
        };
        let mixer = match self.mixer {
            Some(Mixer::Shift) => None,
            m => m,
        };
        ModelConfig {
            family,
            mixer,
            shift: None,
            shift_scope: ShiftScope::All,
            ..self.clone()
        }
    }

    /// Input feature width.
    pub fn input_channels(&self) -> usize {
        self.channels[0]
    }

    /// Width of the block stack output.
    pub fn output_channels(&self) -> usize {
        *self.channels.last().expect("validated channels")
    }

    pub fn hidden_channels(&self) -> usize {
        self.channels[1]
    }

    /// Effective token mixer for transformer-family blocks.
    pub fn token_mixer(&self) -> Option<Mixer> {
        match self.family {
            Family::Transformer => Some(self.mixer.unwrap_or(Mixer::Attention)),
            Family::Shiftformer => Some(Mixer::Shift),
            _ => None,
        }
    }

    /// Whether block `i` hosts the trunk/branch shift (not the token mixer).
    pub fn block_shift(&self, i: usize) -> Option<&ShiftConfig> {
        if self.token_mixer() == Some(Mixer::Shift) {
            return None;
        }
        let in_scope = match self.shift_scope {
            ShiftScope::All => true,
            ShiftScope::Last => i + 1 == self.blocks,
        };
        self.shift.as_ref().filter(|_| in_scope)
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.channels;
        match self.family {
            Family::Lstm => {
                if c.len() != 2 || c[0] == 0 || c[1] == 0 || !c[1].is_multiple_of(2) {
                    return Err(Error::config(
                        "channels",
                        format!("lstm expects (C, 2H) with positive C and even 2H, got {c:?}"),
                    ));
                }
            }
            _ => {
                if c.len() != 3 || c[0] == 0 || c[1] == 0 || c[0] != c[2] {
                    return Err(Error::config(
                        "channels",
                        format!("expected (C, hidden, C) with positive widths, got {c:?}"),
                    ));
                }
            }
        }
        if self.blocks == 0 {
            return Err(Error::config("blocks", "at least one block is required"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "at least two classes are required"));
        }
        if self.num_input_layers == 0 {
            return Err(Error::config("num_input_layers", "must be positive"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("norm_eps", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum", "must lie in [0, 1]"));
        }
        if self.family == Family::Cnn && self.kernel.is_multiple_of(2) {
            return Err(Error::config(
                "kernel",
                format!("kernel size must be odd, got {}", self.kernel),
            ));
        }
        if self.mixer.is_some() && self.family != Family::Transformer {
            return Err(Error::config(
                "mixer",
                "only the transformer family takes a token mixer choice",
            ));
        }
        if self.family == Family::Lstm && self.norm == NormKind::Batch {
            return Err(Error::config("norm", "the lstm family has no normalization layer"));
        }
        match self.token_mixer() {
            Some(Mixer::Attention) => {
                if self.heads == 0 || !c[0].is_multiple_of(self.heads) {
                    return Err(Error::config(
                        "heads",
                        format!("{} channels are not divisible by {} heads", c[0], self.heads),
                    ));
                }
                if self.pos == PositionMode::Absolute && self.max_frames == 0 {
                    return Err(Error::config("max_frames", "must be positive"));
                }
            }
            Some(Mixer::Pooling) => {
                if self.pool_window.is_multiple_of(2) {
                    return Err(Error::config("pool_window", "window must be odd"));
                }
            }
            Some(Mixer::Shift) if self.shift.is_none() => {
                return Err(Error::config(
                    "shift",
                    "a shift token mixer needs a shift configuration",
                ));
            }
            _ => {}
        }
        if let Some(shift) = &self.shift {
            shift.plan(c[0])?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(text).map_err(|e| Error::config("model", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
