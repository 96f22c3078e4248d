//! `zenn`: data generation, training, analysis and self-checks for
//! zentropy-enhanced neural network experiments.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zenn::tasks::Task;
use zenn::Error;

#[derive(Parser)]
#[command(name = "zenn", version, about = "Zentropy-enhanced neural network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a benchmark dataset (CSV plus JSON sidecar) and print its checksum.
    Gen {
        /// classify, landscape1d, landscape2d or fe3pt
        task: Task,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV; defaults to `<task>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Grid as `NXxNT` (landscape1d, fe3pt) or `N1xN2` (landscape2d).
        #[arg(long)]
        grid: Option<String>,
        /// Labels per temperature (classify).
        #[arg(long, default_value_t = 10_000)]
        samples_per_t: usize,
    },
    /// Train the ensemble (or the matched DNN baseline) described by a config file.
    Train {
        config: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Train a single network with as many neurons as the ensemble instead.
        #[arg(long, value_parser = ["dnn"])]
        baseline: Option<String>,
    },
    /// Derive curves, contours, isobars and critical points from a trained model.
    Analyze {
        /// `model.json` written by `train`.
        model: PathBuf,
        /// Config file whose `analysis` section applies; the model's own is used otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "analysis")]
        out: PathBuf,
    },
    /// Fit the four-term equation of state to a `V,E` CSV.
    Eosfit {
        input: PathBuf,
        /// Write the fit as JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite and print a pass/fail table.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Spec(_) => 2,
        Error::Parse { .. } | Error::Format { .. } | Error::Io { .. } | Error::Json(_) => 3,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen { task, seed, out, grid, samples_per_t } => {
            commands::gen(task, seed, out.as_deref(), grid.as_deref(), samples_per_t)
        }
        Command::Train { config, out, epochs, seed, learning_rate, baseline } => {
            let overrides = commands::Overrides { epochs, seed, learning_rate };
            commands::train(&config, &out, &overrides, baseline.is_some())
        }
        Command::Analyze { model, config, out } => commands::analyze(&model, config.as_deref(), &out),
        Command::Eosfit { input, out } => commands::eosfit(&input, out.as_deref()),
        Command::Selftest => selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
