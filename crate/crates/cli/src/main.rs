//! `shiftser`: data generation, training, evaluation and cost accounting
//! for temporal-shift sequence classifiers.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use run_config::{DirectionArg, ModelArgs};
use shiftser::shift::parse_alpha;

#[derive(Debug, Parser)]
#[command(name = "shiftser", version, about = "Temporal shift sequence classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic order task as an FSEQ file plus manifest.
    GenData {
        /// Run configuration (TOML); only `seed` and `[generator]` are used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory; receives data.fseq and manifest.toml.
        #[arg(long)]
        out: PathBuf,
    },
    /// Leave-one-group-out cross-validation.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics, curves and checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// FSEQ input; overrides `[data] path`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
        /// Probability of shifting the hidden states of a training batch.
        #[arg(long)]
        augment_prob: Option<f64>,
        /// Run for this many epochs instead of the configured count.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on an FSEQ file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Restrict evaluation to one speaker group.
        #[arg(long)]
        group: Option<u32>,
        /// Optional directory receiving eval.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every op and preset block.
    Gradcheck {
        /// First seed; cases run on `seed..seed+seeds`.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Only run cases whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Parameter and FLOP tables plus the diff against the no-shift baseline.
    Count {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        /// Sequence length used for FLOPs.
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Print `key=value` lines instead of tables.
        #[arg(long)]
        kv: bool,
    },
    /// Apply a temporal shift to every record of an FSEQ file.
    ShiftInspect {
        #[arg(long)]
        input: PathBuf,
        /// Output FSEQ path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1/4", value_parser = parse_alpha_flag)]
        alpha: f64,
        #[arg(long, value_enum, default_value_t = DirectionArg::Uni)]
        direction: DirectionArg,
    },
}

fn parse_alpha_flag(s: &str) -> Result<f64, String> {
    parse_alpha(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::GenData { config, seed, out } => commands::gen_data(config.as_deref(), seed, &out),
        Command::Train {
            config,
            seed,
            out,
            data,
            folds,
            model,
            augment_prob,
            epochs,
        } => commands::train(commands::TrainArgs {
            config,
            seed,
            out,
            data,
            folds,
            model,
            augment_prob,
            epochs,
        }),
        Command::Eval {
            checkpoint,
            data,
            group,
            out,
        } => commands::eval(&checkpoint, &data, group, out.as_deref()),
        Command::Gradcheck { seed, seeds, filter } => commands::gradcheck(seed, seeds, filter.as_deref()),
        Command::Count {
            config,
            model,
            frames,
            kv,
        } => commands::count(config.as_deref(), &model, frames, kv),
        Command::ShiftInspect {
            input,
            out,
            alpha,
            direction,
        } => commands::shift_inspect(&input, &out, alpha, direction),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
