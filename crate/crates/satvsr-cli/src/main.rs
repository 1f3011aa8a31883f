//! `satvsr`: dataset building, training, evaluation, ablation, and
//! single-clip inference over one flat configuration.
//!
//! Exit codes: 0 success, 1 user error (arguments, config, missing or
//! malformed inputs), 2 internal error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "satvsr",
    version,
    about = "Scenario-adaptive video super-resolution",
    after_help = config::keys_help()
)]
struct Cli {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Builds a clip dataset: HR frames, a degraded `lr/` mirror, flow files.
    Dataset {
        /// Dataset directory to create.
        #[arg(long)]
        out: PathBuf,
        /// Generates this many synthetic source scenes.
        #[arg(long)]
        synth: Option<usize>,
        /// Degrades existing HR clip directories from here instead.
        #[arg(long)]
        src: Option<PathBuf>,
        /// Splices scene pairs into cross-scene clips with a manifest.
        #[arg(long)]
        fuse: bool,
    },
    /// Trains a model, writing checkpoints and a loss log.
    Train {
        /// Dataset directory (from `dataset`).
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and `loss_log.tsv`.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `total_iters`.
        #[arg(long)]
        iters: Option<u64>,
        /// Continues from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Scores PSNR/SSIM on the Y channel over a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `report.txt` / `report.json`.
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Evaluates a checkpoint-free baseline (`bicubic`) instead.
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Trains and scores the three architecture variants under one budget.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// Output root; one subdirectory per variant plus the comparison.
        #[arg(long)]
        out: PathBuf,
        /// Overrides `total_iters` for every variant.
        #[arg(long)]
        iters: Option<u64>,
    },
    /// Super-resolves one LR clip's reference frame to a PNG.
    Infer {
        /// LR clip directory: `im1.png … imT.png`, optional flow files.
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output directory for `sr.png`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 1 is a problem with the invocation or its inputs, 2 a failure inside the
/// pipeline (divergence, serialization bugs).
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<commands::UserError>().is_some() {
        return 1;
    }
    if let Some(e) = err.downcast_ref::<satvsr::Error>() {
        return match e {
            satvsr::Error::Config(_)
            | satvsr::Error::Data(_)
            | satvsr::Error::Shape(_)
            | satvsr::Error::Io(_)
            | satvsr::Error::Image(_) => 1,
            satvsr::Error::NonFiniteLoss { .. } | satvsr::Error::Json(_) => 2,
        };
    }
    if err.downcast_ref::<std::io::Error>().is_some() {
        return 1;
    }
    2
}
