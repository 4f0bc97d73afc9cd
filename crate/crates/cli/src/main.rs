//! `vpglab`: identity verification, guided sampling, sweeps, ablations and
//! diagnostics on enumerable next-scale models.

mod commands;
mod error;
mod overrides;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::overrides::Overrides;

#[derive(Debug, Parser)]
#[command(name = "vpglab", version, about = "Prefix and classifier-free guidance laboratory")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check the guidance identities against brute-force enumeration; exit 1 on any violation
    Verify {
        /// Offending tuples to print on failure
        #[arg(long, default_value_t = 10)]
        show: usize,
    },
    /// Draw guided samples; writes traces, corruption plans and decoded images
    Sample {
        #[arg(long, short = 'n', default_value_t = 4)]
        count: usize,
    },
    /// Recompute a recorded trace's logits and require a bit-exact match
    Replay {
        /// Trace CSV written by `sample`
        #[arg(long)]
        trace: PathBuf,
        /// Plan CSV written by `sample`; omit when the run drew no plans
        #[arg(long)]
        plans: Option<PathBuf>,
    },
    /// Run the configured sweep grid; writes CSV and one SVG per metric
    Sweep,
    /// Every corruption variant at the configured n_p across the sweep lambdas
    Ablate,
    /// Encode and decode seeded synthetic images; writes per-scale residual norms
    Roundtrip {
        #[arg(long, short = 'n', default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        image_seed: u64,
    },
    /// Write a seeded synthetic token corpus as CSV
    Corpus {
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        corpus_seed: u64,
    },
    /// Build or fit the configured model and write it as JSON
    Fit,
    /// Surrogate-gap and exposure-gap diagnostics for the configured model
    Report {
        /// Corruption plans per (variant, n_p) for the surrogate gap
        #[arg(long, default_value_t = 16)]
        plans: usize,
        /// Rollouts for the exposure gap
        #[arg(long, default_value_t = 128)]
        rollouts: usize,
    },
    /// Print the effective config as JSON
    Config {
        /// Write to this file instead of stdout
        #[arg(long)]
        write: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let matches = Cli::command()
        .after_long_help(overrides::config_keys_help())
        .after_help(overrides::config_keys_help())
        .get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = cli
        .overrides
        .resolve()
        .and_then(|config| commands::run(&config, cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vpglab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
