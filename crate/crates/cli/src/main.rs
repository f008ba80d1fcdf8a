//! Command-line pipeline runner.
//!
//! One subcommand per pipeline stage: dataset synthesis, prompt
//! corruption, fine-tuning, scoring, Best-of-N runs, evaluation and plot
//! data emission. Every subcommand is config-file-first (`--config`
//! pointing at JSON) with flag overrides, and writes a resolved-config
//! snapshot beside its outputs so any run can be reproduced.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error,
//! 4 backend/transport error.

mod commands;
mod common;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "latent-align",
    version,
    about = "Alignment scoring on noisy diffusion latents: datasets, training, Best-of-N and evaluation"
)]
struct Cli {
    /// JSON config file for the subcommand; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    /// Directory all outputs are written under.
    #[arg(long, global = true, default_value = "runs/latest")]
    output_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a trajectory dataset with the toy generation backend.
    BuildDataset(commands::build_dataset::Args),
    /// Generate four targeted corruptions per prompt via an LLM client.
    Corrupt(commands::corrupt::Args),
    /// Fine-tune the image tower on noisy-latent previews.
    Train(commands::train::Args),
    /// Dump per-step alignment scores for every sample in a dataset.
    Score(commands::score::Args),
    /// Run Best-of-N generation with early pruning and cost accounting.
    Bon(commands::bon::Args),
    /// Compute metric reports: consistency, delta, bon, range-grid.
    Eval(commands::eval::Args),
    /// Convert a report into deterministic figure data files.
    Plot(commands::plot::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = common::Context {
        config_path: cli.config,
        seed: cli.seed,
        workers: cli.workers.max(1),
        output_dir: cli.output_dir,
    };
    let result = match cli.command {
        Command::BuildDataset(args) => commands::build_dataset::run(&ctx, args),
        Command::Corrupt(args) => commands::corrupt::run(&ctx, args),
        Command::Train(args) => commands::train::run(&ctx, args),
        Command::Score(args) => commands::score::run(&ctx, args),
        Command::Bon(args) => commands::bon::run(&ctx, args),
        Command::Eval(args) => commands::eval::run(&ctx, args),
        Command::Plot(args) => commands::plot::run(&ctx, args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
