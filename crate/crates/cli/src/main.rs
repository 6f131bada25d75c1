//! `msziarmn`: simulate, fit, compare and summarize MS-ZIARMN models.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
//! 3 numerical failure, 4 not converged under `--strict`.

mod commands;
mod config;
mod inputs;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msziarmn::model::ModelVariant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("not converged (R-hat above threshold): {0}")]
    NotConverged(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::NotConverged(_) => 4,
        }
    }
}

#[derive(Parser)]
#[command(name = "msziarmn", version, about = "Markov-switching zero-inflated multinomial models for multi-disease counts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Model variant: ms-ziarmn, ziarmn, zeng or armn.
    #[arg(long)]
    variant: Option<ModelVariant>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of chains.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a panel from known parameters.
    Simulate(Common),
    /// Fit a model and write draws, diagnostics and summaries.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Exit with status 4 when any R-hat exceeds the threshold.
        #[arg(long)]
        strict: bool,
    },
    /// Recompute the WAIC from stored draws.
    Waic {
        #[command(flatten)]
        common: Common,
        /// Directory written by `fit`.
        #[arg(long)]
        draws: PathBuf,
    },
    /// Recompute summary tables from stored draws.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        draws: PathBuf,
    },
}

fn load(c: &Common) -> Result<config::Loaded, CliError> {
    let overrides = config::Overrides { variant: c.variant, seed: c.seed, output_dir: c.output_dir.clone() };
    config::load(&c.config, &overrides)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => commands::simulate(&load(&c)?),
        Command::Fit { common, strict } => commands::fit(&load(&common)?, common.threads, strict),
        Command::Waic { common, draws } => {
            commands::waic(&load(&common)?, &draws, common.output_dir.is_some(), common.threads)
        }
        Command::Summarize { common, draws } => commands::summarize(&load(&common)?, &draws, common.output_dir.is_some()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
