//! Range-visual-inertial odometry pipeline.
//!
//! Subcommands: `sim` writes a synthetic dataset, `run` executes the filter
//! over a dataset directory, `eval` compares estimates against ground
//! truth, `obs` prints the observability report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rvio_core::Error;

mod commands;
mod config;
mod io;

use commands::CommonOpts;
use config::Config;

#[derive(Parser)]
#[command(name = "rvio", version, about = "range-visual-inertial odometry pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset / output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (sim) or trial-perturbation seed (run).
    #[arg(long)]
    seed: Option<u64>,
    /// Fan out over independent seeded trials in trial_NNN subdirectories.
    #[arg(long)]
    trials: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (imu.csv, features.csv, range.csv, truth.csv).
    Sim(Common),
    /// Run the filter over a dataset directory, writing estimates.csv and diagnostics.csv.
    Run {
        #[command(flatten)]
        common: Common,
        /// Disable range updates (VIO baseline).
        #[arg(long)]
        no_range: bool,
        /// Disable visual updates (inertial dead reckoning).
        #[arg(long)]
        no_vision: bool,
    },
    /// Compare estimates.csv against truth.csv, writing metrics.csv.
    Eval(Common),
    /// Numerical observability report for the configured trajectory.
    Obs(Common),
}

fn load(common: &Common) -> Result<CommonOpts, Error> {
    let config = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::empty(),
    };
    Ok(CommonOpts {
        config,
        out: common.out.clone(),
        seed: common.seed,
        trials: common.trials,
    })
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) => 1,
        Error::Data { .. } | Error::Io(_) => 2,
        Error::Numerical(_) | Error::UpdateRejected(_) | Error::DimensionMismatch { .. } => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Sim(common) => load(common).and_then(|o| commands::cmd_sim(&o)),
        Command::Run {
            common,
            no_range,
            no_vision,
        } => load(common).and_then(|o| commands::cmd_run(&o, *no_range, *no_vision)),
        Command::Eval(common) => load(common).and_then(|o| commands::cmd_eval(&o)),
        Command::Obs(common) => load(common).and_then(|o| commands::cmd_obs(&o)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
