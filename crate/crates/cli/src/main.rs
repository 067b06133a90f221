//! `crformer`: synthetic data, training, inference, evaluation and checks.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "crformer", version, about = "Shadow removal with region-aware cross-attention")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOpts {
    /// TOML configuration for the chosen command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Default bundle used when no configuration file is given.
    #[arg(long, global = true, value_enum, default_value_t = ProfileArg::Desk)]
    profile: ProfileArg,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset in the shadow/shadow_free/mask layout.
    Synth {
        #[arg(long)]
        samples: Option<usize>,
        /// Square image side.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model and write its checkpoint and loss log.
    Train {
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Optional line-per-triplet manifest of relative paths.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Run a checkpoint on one image and write every stage as PNG.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        /// Shadow-free reference; enables the error heatmap.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Score a checkpoint (or the raw inputs) on a dataset.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Omit to score only the unprocessed shadow images.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck {
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Compare region-aware attention with a brute-force double loop.
    AttnOracle {
        /// Number of tokens (H·W).
        #[arg(long, default_value_t = 64)]
        tokens: usize,
        #[arg(long, default_value_t = 8)]
        channels: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli.global, cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
