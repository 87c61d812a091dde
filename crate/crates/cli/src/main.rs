//! `quantbench`: ingest prices and news, train and benchmark LSTM forecasters,
//! and produce returns-to-volatility advisories.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "quantbench",
    version,
    about = "LSTM stock forecasting benchmark and advisory tool"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides the model and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load and validate price history (and news), writing normalised copies.
    Ingest(Common),
    /// Train the configured architecture; writes model.qbnn, loss.csv and scaler.json.
    Train(Common),
    /// Forecast the next `horizon` closes with a trained model.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<output_dir>/model.qbnn`.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Defaults to `<output_dir>/scaler.json`.
        #[arg(long)]
        scaler: Option<PathBuf>,
    },
    /// Train and compare the standard model lineup; writes benchmark.csv and forecast CSVs.
    Benchmark {
        #[command(flatten)]
        common: Common,
        /// Also run the window/horizon sweep and write sweep.csv.
        #[arg(long)]
        sweep: bool,
    },
    /// Rank symbols by returns-to-volatility ratio; writes advisory.csv.
    Advise {
        #[command(flatten)]
        common: Common,
        /// Append each symbol's next-close forecast from this model.
        #[arg(long)]
        use_model: Option<PathBuf>,
    },
    /// Certify backpropagation for every architecture against finite differences.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(dir) = &common.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = Some(seed);
        cfg.train.seed = seed;
        if let Some(m) = &mut cfg.model {
            m.seed = seed;
        }
    }
    if let Some(epochs) = common.epochs {
        cfg.train.epochs = epochs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Ingest(c) => commands::ingest(&load(&c)?),
        Command::Train(c) => commands::train_cmd(&load(&c)?),
        Command::Predict {
            common,
            model,
            scaler,
        } => commands::predict_cmd(&load(&common)?, model, scaler),
        Command::Benchmark { common, sweep } => commands::benchmark_cmd(&load(&common)?, sweep),
        Command::Advise { common, use_model } => commands::advise_cmd(&load(&common)?, use_model),
        Command::Gradcheck { inject_fault } => {
            if commands::gradcheck_cmd(inject_fault)? {
                Ok(())
            } else {
                Err(CliError::Training("gradient check failed".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Usage mistakes count as configuration errors.
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
