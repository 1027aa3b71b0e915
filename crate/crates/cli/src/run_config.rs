//! Run configuration file and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;
use shiftser::blocks::{Family, Mixer, ModelConfig, Preset};
use shiftser::data::SynthConfig;
use shiftser::shift::{parse_alpha, Direction, Placement, ShiftConfig};
use shiftser::train::TrainConfig;

fn default_folds() -> usize {
    5
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// FSEQ file; when absent, training data is generated from `[generator]`.
    pub path: Option<PathBuf>,
    #[serde(default = "default_folds")]
    pub folds: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            folds: default_folds(),
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub preset: Option<Preset>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub generator: SynthConfig,
    #[serde(default)]
    pub data: DataSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config file {}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    Inplace,
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DirectionArg {
    Uni,
    Bi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MixerArg {
    Attention,
    Pooling,
    Shift,
    None,
}

impl From<PlacementArg> for Placement {
    fn from(p: PlacementArg) -> Self {
        match p {
            PlacementArg::Inplace => Placement::InPlace,
            PlacementArg::Residual => Placement::Residual,
        }
    }
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Uni => Direction::Unidirectional,
            DirectionArg::Bi => Direction::Bidirectional,
        }
    }
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn parse_alpha_arg(s: &str) -> std::result::Result<f64, String> {
    parse_alpha(s).map_err(|e| e.to_string())
}

/// Architecture flags shared by `train` and `count`.
#[derive(Debug, Clone, Default, Args)]
pub struct ModelArgs {
    /// Architecture preset: shiftcnn, cnn, shiftformer, transformer, shiftlstm, lstm.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Shifted channel proportion, as a decimal or a fraction such as 1/8.
    #[arg(long, value_parser = parse_alpha_arg)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub placement: Option<PlacementArg>,
    #[arg(long, value_enum)]
    pub direction: Option<DirectionArg>,
    /// Token mixer of transformer-family models.
    #[arg(long, value_enum)]
    pub mixer: Option<MixerArg>,
}

/// Where the architecture came from; presets adapt to the data.
pub struct Resolved {
    pub model: ModelConfig,
    pub from_preset: bool,
}

pub fn resolve_model(cfg: &RunConfig, args: &ModelArgs) -> Result<Resolved> {
    let (mut model, from_preset) = match (args.preset, &cfg.model, cfg.preset) {
        (Some(p), _, _) => (ModelConfig::preset(p), true),
        (None, Some(m), _) => (m.clone(), false),
        (None, None, Some(p)) => (ModelConfig::preset(p), true),
        (None, None, None) => (ModelConfig::preset(Preset::ShiftCnn), true),
    };
    apply_overrides(&mut model, args)?;
    Ok(Resolved { model, from_preset })
}

fn apply_overrides(model: &mut ModelConfig, args: &ModelArgs) -> Result<()> {
    if let Some(mixer) = args.mixer {
        if !matches!(model.family, Family::Transformer | Family::Shiftformer) {
            bail!("--mixer applies to transformer-family models only");
        }
        match mixer {
            MixerArg::Shift => {
                model.family = Family::Shiftformer;
                model.mixer = None;
                if model.shift.is_none() {
                    model.shift = Some(ShiftConfig::new(
                        0.25,
                        Direction::Bidirectional,
                        Placement::Residual,
                    ));
                }
            }
            other => {
                model.family = Family::Transformer;
                model.mixer = Some(match other {
                    MixerArg::Attention => Mixer::Attention,
                    MixerArg::Pooling => Mixer::Pooling,
                    _ => Mixer::None,
                });
            }
        }
    }
    let touches_shift = args.alpha.is_some() || args.placement.is_some() || args.direction.is_some();
    if touches_shift {
        let mut shift = match (model.shift, args.alpha) {
            (Some(s), _) => s,
            (None, Some(alpha)) => ShiftConfig::new(alpha, Direction::Unidirectional, Placement::InPlace),
            (None, None) => bail!("the model has no temporal shift; pass --alpha to add one"),
        };
        if let Some(alpha) = args.alpha {
            shift.alpha = alpha;
        }
        if let Some(p) = args.placement {
            shift.placement = p.into();
        }
        if let Some(d) = args.direction {
            shift.direction = d.into();
        }
        model.shift = Some(shift);
    }
    Ok(())
}
