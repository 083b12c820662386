//! `hystkit`: hysteresis modelling, compensation and closed-loop experiments.
//!
//! Exit status: 0 success, 1 output write failure, 2 configuration or input
//! error, 3 numerical failure.

mod commands;
mod config;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hystkit::Error;

use crate::commands::Context;

#[derive(Debug, Parser)]
#[command(
    name = "hystkit",
    version,
    about = "Hysteresis modelling and 2DOF position control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Data file format.
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    /// Also write a gnuplot script `plot.gp` next to the data.
    #[arg(long)]
    plot: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sweep an input waveform through a KP hysteresis model.
    Hysteresis(Common),
    /// Drive the inversion-free compensator with a reference.
    Compensate(Common),
    /// Run the closed-loop scenario in each configured mode, in parallel.
    Closedloop(Common),
    /// Estimate an FRF, fit a delayed second-order plant, report margins.
    Frf(Common),
    /// Identify a KP model from an input/output record.
    Fit(Common),
    /// Stability margins and Bode data of the PI-filter-plant loop.
    Margins(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        e if e.is_numerical() => 3,
        Error::Io { .. } => 1,
        _ => 2,
    }
}

fn run_with<C, F>(common: &Common, run: F) -> hystkit::Result<String>
where
    C: serde::de::DeserializeOwned + serde::Serialize + Default,
    F: FnOnce(C, &Context) -> hystkit::Result<String>,
{
    let Format::Csv = common.format;
    let cfg: C = config::load(common.config.as_deref())?;
    if common.print_config {
        return Ok(config::to_toml(&cfg));
    }
    let base = common
        .config
        .as_deref()
        .and_then(Path::parent)
        .map(Path::to_owned)
        .unwrap_or_default();
    let ctx = Context {
        base,
        out: common.out.clone(),
        seed: common.seed,
        plot: common.plot,
    };
    run(cfg, &ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Hysteresis(c) => run_with(c, commands::hysteresis),
        Command::Compensate(c) => run_with(c, commands::compensate),
        Command::Closedloop(c) => run_with(c, commands::closedloop),
        Command::Frf(c) => run_with(c, commands::frf),
        Command::Fit(c) => run_with(c, commands::fit),
        Command::Margins(c) => run_with(c, commands::margins),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
