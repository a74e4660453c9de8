//! `cmgan`: train, adapt, fine-tune, predict and evaluate from the shell.
//!
//! Exit status is 0 on success, 2 for invalid input or configuration and 1
//! for internal failures.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmgan_core::CoreError;

#[derive(Debug, Parser)]
#[command(
    name = "cmgan",
    version,
    about = "Color-map adaptation for aerial image segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Precedence, lowest first: built-in
/// defaults, `--config`, `--set`, the dedicated flags.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Key-value configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every step derives its own seed from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created when missing.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Adaptation method: colormapgan, histmatch, grayworld or none.
    #[arg(long, value_name = "NAME")]
    pub method: Option<String>,
    /// Iteration budget of this subcommand's training step.
    #[arg(long, value_name = "N")]
    pub iters: Option<usize>,
    /// Override one configuration key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train the initial segmenter on the labeled source domain.
    Train {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fit an adaptation method and write recolored images.
    Adapt {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a trained segmenter on the recolored source.
    Finetune {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Segmenter checkpoint manifest.
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        /// Output directory of `adapt`.
        #[arg(long, value_name = "DIR")]
        adapted: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Label an image with a segmenter.
    Predict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Score a predicted mask against ground truth.
    Eval {
        #[arg(long, value_name = "PATH")]
        pred: PathBuf,
        /// Dataset whose target mask is the ground truth.
        #[arg(
            long,
            value_name = "DIR",
            conflicts_with = "truth",
            required_unless_present = "truth"
        )]
        data: Option<PathBuf>,
        /// Ground-truth mask file.
        #[arg(long, value_name = "PATH")]
        truth: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Repeat fine-tuning and prediction, averaging IoU and voting masks.
    Repeat {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "DIR")]
        adapted: PathBuf,
        /// Number of runs; overrides the `runs` key.
        #[arg(long)]
        runs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train { data, common } => commands::train(&common, &data),
        Command::Adapt { data, common } => commands::adapt(&common, &data),
        Command::Finetune {
            data,
            model,
            adapted,
            common,
        } => commands::finetune(&common, &data, &model, &adapted),
        Command::Predict { model, image, common } => commands::predict(&common, &model, &image),
        Command::Eval {
            pred,
            data,
            truth,
            common,
        } => commands::eval(&common, &pred, data.as_deref(), truth.as_deref()),
        Command::Repeat {
            data,
            model,
            adapted,
            runs,
            common,
        } => commands::repeat(&common, &data, &model, &adapted, runs),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let user = err.chain().any(|e| {
        e.downcast_ref::<CoreError>().is_some_and(CoreError::is_user_error)
            || e.downcast_ref::<std::io::Error>().is_some()
            || matches!(
                e.downcast_ref::<cmgan_nn::NnError>(),
                Some(cmgan_nn::NnError::Checkpoint(_) | cmgan_nn::NnError::Io(_))
            )
    });
    if user {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
