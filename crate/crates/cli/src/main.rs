//! mvid: multi-view latent process identification experiments.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use mvid_core::error::CoreError;

#[derive(Parser)]
#[command(name = "mvid", version, about = "Multi-view latent VAR identification")]
struct Cli {
    /// Worker threads (default: MVID_THREADS env, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from an experiment config.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for the dataset file.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed (process and training).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for trace, checkpoints and summary.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a debug mode) on the validation split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Needed for the identity and supervised modes.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "checkpoint")]
        mode: commands::EvalMode,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an ablation grid and write a mean/std summary table.
    Ablate {
        /// Grid config file.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Restrict the grid to a single seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_threads(cli_threads: Option<usize>) {
    let from_env = std::env::var("MVID_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok());
    if let Some(n) = cli_threads.or(from_env) {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
}

fn main() {
    let cli = Cli::parse();
    init_threads(cli.threads);

    let result = match &cli.command {
        Command::Generate { config, out, seed } => commands::cmd_generate(config, out, *seed),
        Command::Train {
            config,
            dataset,
            out,
            seed,
            checkpoint,
        } => commands::cmd_train(config, dataset, out, *seed, checkpoint.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            dataset,
            out,
            mode,
            seed,
        } => commands::cmd_eval(
            checkpoint.as_deref(),
            config.as_deref(),
            dataset,
            out,
            *mode,
            *seed,
        ),
        Command::Ablate { config, out, seed } => commands::cmd_ablate(config, out, *seed),
    };

    match result {
        Ok(()) => {}
        Err(e @ CoreError::Numerical(_)) => {
            eprintln!("error: {}", e);
            std::process::exit(3);
        }
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(2);
        }
    }
}
