//! `levy`: simulate, infer, forecast and diagnose Lévy-driven Langevin models.

mod commands;
mod config;
mod error;
mod ingest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::Run;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser)]
#[command(name = "levy", version, about)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every component draws from its own named substream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Directory receiving all outputs.
    #[arg(long, global = true, default_value = "run")]
    out_dir: PathBuf,
    /// Configuration override `section.key=value`, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic dataset with ground-truth sidecars.
    Simulate,
    /// Run the MCMC sampler on a `time,value` CSV.
    Infer { data: PathBuf },
    /// Train on the leading part of the data and forecast the rest one step ahead.
    Forecast { data: PathBuf },
    /// Autocorrelation diagnostics of an `infer` run directory.
    Diagnose { run_dir: PathBuf },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p)?,
        None => String::new(),
    };
    let config = RunConfig::load(&text, &cli.overrides)?;
    std::fs::create_dir_all(&cli.out_dir)?;
    let run = Run {
        config,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match &cli.command {
        Command::Simulate => commands::simulate(&run),
        Command::Infer { data } => commands::infer(&run, data),
        Command::Forecast { data } => commands::forecast(&run, data),
        Command::Diagnose { run_dir } => commands::diagnose(&run, run_dir),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
