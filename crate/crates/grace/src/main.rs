use std::path::PathBuf;

use clap::{Parser, Subcommand};

use grace::cli::{cmd_report, cmd_run, RunOptions};
use grace::config::EngineOverrides;

/// Prompt optimization through gated refinement and adaptive compression.
#[derive(Parser)]
#[command(name = "grace", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run (or resume) an optimization loop described by a config file.
    Run {
        /// TOML run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Override the engine seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the iteration budget T.
        #[arg(long = "max-iters")]
        max_iters: Option<u32>,
        /// Override the compression trigger K.
        #[arg(long)]
        k: Option<u32>,
        /// Override the success-batch size.
        #[arg(long = "n-success")]
        n_success: Option<usize>,
        /// Override the failure-batch size.
        #[arg(long = "n-failure")]
        n_failure: Option<usize>,
        /// Override the early-stop window (0 disables).
        #[arg(long = "early-stop")]
        early_stop: Option<u32>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        /// Validate the config and render the first meta-prompt without
        /// any model calls.
        #[arg(long = "dry-run")]
        dry_run: bool,
    },
    /// Summarize a run directory and emit convergence data.
    Report {
        #[arg(long = "run-dir")]
        run_dir: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            seed,
            max_iters,
            k,
            n_success,
            n_failure,
            early_stop,
            resume,
            dry_run,
        } => {
            let options = RunOptions {
                config_path: config,
                overrides: EngineOverrides {
                    seed,
                    max_iters,
                    compression_trigger: k,
                    n_success,
                    n_failure,
                    early_stop,
                },
                resume,
                dry_run,
            };
            cmd_run(&options)?;
        }
        Command::Report { run_dir } => {
            cmd_report(&run_dir)?;
        }
    }
    Ok(())
}
