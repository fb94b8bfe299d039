//! `covxr` — chest X-ray COVID-19 classification pipeline.
//!
//! Subcommands cover the four pipeline stages (dataset preparation,
//! training, evaluation, reporting) plus single-image prediction and
//! saliency visualization. Exit codes: 0 success, 1 internal error,
//! 2 bad input or configuration.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use covxr::dataset::DatasetError;
use covxr::eval::EvalError;
use covxr::imagebuf::ImageBufError;
use covxr::model::ModelError;
use covxr::preprocess::PreprocessError;
use covxr::report::ReportError;
use covxr::saliency::SaliencyError;
use covxr::train::TrainError;

use config::RunConfig;

/// Marker for command-line / input mistakes (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "covxr", version, about = "Chest X-ray COVID-19 classification pipeline")]
struct Cli {
    /// Flat key=value config file (see README for the key list).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed for balancing, splitting, shuffling, and initialization.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Decision threshold for predictions and metrics.
    #[arg(long, global = true)]
    threshold: Option<f64>,

    /// Output directory for checkpoints, metrics, and plots.
    #[arg(long = "out-dir", global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a <class>/<image> folder layout into a manifest CSV.
    Prepare {
        raw_dir: PathBuf,
        out_manifest: PathBuf,
    },
    /// Balance, split, and train; writes history and the best checkpoint.
    Train { train_manifest: PathBuf },
    /// Score a test manifest with a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        test_manifest: PathBuf,
    },
    /// Score one image; prints `<path> <probability> <label>`.
    Predict {
        checkpoint: PathBuf,
        image_path: PathBuf,
    },
    /// Write a saliency overlay PNG and metadata sidecar for one image.
    Saliency {
        checkpoint: PathBuf,
        image_path: PathBuf,
        out_png: PathBuf,
        /// Heatmap opacity in [0, 1].
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
    },
    /// Regenerate metric curves and plots from history + metrics files.
    Report {
        history_path: PathBuf,
        eval_json: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), cli.seed, cli.threshold)?;
    let out_dir = cli.out_dir.unwrap_or_else(|| PathBuf::from("covxr-out"));
    match cli.command {
        Command::Prepare {
            raw_dir,
            out_manifest,
        } => commands::cmd_prepare(&raw_dir, &out_manifest),
        Command::Train { train_manifest } => commands::cmd_train(&cfg, &train_manifest, &out_dir),
        Command::Evaluate {
            checkpoint,
            test_manifest,
        } => commands::cmd_evaluate(&cfg, &checkpoint, &test_manifest, &out_dir),
        Command::Predict {
            checkpoint,
            image_path,
        } => commands::cmd_predict(&cfg, &checkpoint, &image_path),
        Command::Saliency {
            checkpoint,
            image_path,
            out_png,
            alpha,
        } => commands::cmd_saliency(&cfg, &checkpoint, &image_path, &out_png, alpha),
        Command::Report {
            history_path,
            eval_json,
        } => commands::cmd_report(&cfg, &history_path, &eval_json, &out_dir),
    }
}

/// Map an error chain onto the documented exit codes: anything caused by
/// the user's inputs or configuration is 2, everything else 1.
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>()
            || cause.is::<DatasetError>()
            || cause.is::<PreprocessError>()
            || cause.is::<ImageBufError>()
            || cause.is::<ModelError>()
            || cause.is::<EvalError>()
            || cause.is::<SaliencyError>()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Io { .. } => 1,
                _ => 2,
            };
        }
        if let Some(e) = cause.downcast_ref::<ReportError>() {
            return match e {
                ReportError::EmptyHistory
                | ReportError::UnwritableDirectory { .. }
                | ReportError::Json(_) => 2,
            };
        }
        if cause.is::<std::num::ParseIntError>() || cause.is::<std::num::ParseFloatError>() {
            return 2;
        }
    }
    // config-file read/parse failures carry a "config" context message
    if err.to_string().contains("config") {
        return 2;
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
