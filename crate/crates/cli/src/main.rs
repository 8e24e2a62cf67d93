//! Command-line front end: data generation, both training stages,
//! evaluation, gradient checks, joint regression, feature export and the
//! module ablation grid.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "skelreid", version, about = "Skeleton-guided video person re-identification at desk scale")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Starting configuration before the file and overrides are applied.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// JSON configuration; keys it sets replace the preset's.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override such as `stage2.use_sgtm=false`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed of every random draw, data included.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Keep logs free of wall-clock timings.
    #[arg(long, global = true, default_value_t = true, num_args = 0..=1, default_missing_value = "true", action = clap::ArgAction::Set)]
    pub deterministic: bool,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Learning rates and batch shapes for training from scratch in minutes.
    Desk,
    /// Ten-epoch warmup to 5e-6 with decays at 30, 50 and 70; 4x4 batches.
    Reference,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with a manifest.
    GenData,
    /// Skeleton self-training (if enabled) and contrastive alignment.
    Pretrain {
        /// Dataset directory; generated from the configuration when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Identity finetuning from a pretraining checkpoint.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint written by `pretrain`.
        #[arg(long)]
        init: PathBuf,
    },
    /// Retrieval metrics for a checkpoint, or for exported feature files.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with_all = ["query", "gallery"])]
        checkpoint: Option<PathBuf>,
        /// Skeleton queries against visual gallery in the aligned space.
        #[arg(long, requires = "checkpoint")]
        cross_modal: bool,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
    },
    /// Finite-difference checks of every registered operation and loss.
    Gradcheck {
        #[arg(long, default_value_t = skelreid::gradcheck_suite::DEFAULT_SEEDS)]
        seeds: usize,
        /// Only checks whose name contains this text.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Regress joint positions from mesh vertices.
    RegressJoints {
        /// Wavefront `.obj` mesh; repeat for a sequence of frames.
        #[arg(long, required = true)]
        obj: Vec<PathBuf>,
        /// `[joints, vertices]` regressor tensor file.
        #[arg(long)]
        regressor: PathBuf,
    },
    /// Write query and gallery features of a checkpoint.
    ExportFeatures {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = ExportKind::Retrieval)]
        kind: ExportKind,
    },
    /// Train every finetuning variant for several seeds and compare.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
        /// Comma-separated variant names; all six by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    Retrieval,
    Aligned,
    Visual,
    Skeleton,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
