//! CLI entry point: config-driven experiments with exit codes
//! 0 = pass, 1 = gate/assertion failure, 2 = config error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transport_inverse::harness::{
    cmd_all, cmd_carleman, cmd_forward, cmd_invert, cmd_stability, cmd_weights, Experiment,
    ExperimentConfig,
};
use transport_inverse::Error;

#[derive(Parser)]
#[command(
    name = "transport-inverse",
    about = "Transport-equation forward solves, Carleman inequality verification, and single-measurement inverse reconstruction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides the config's run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Refine every resolution (cells and time steps) by 2^k.
    #[arg(long, default_value_t = 0, global = true)]
    refine: u32,

    /// Seed override for all stochastic choices.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Suppress progress output (reports are still written).
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Construct the Carleman weights and print every derived constant.
    Weights,
    /// Forward transport solve with trace/field dumps and energy report.
    Forward,
    /// Verify the Carleman inequalities over random ensembles.
    Carleman,
    /// Build the measurement operator, run gates, reconstruct the source.
    Invert,
    /// Stability-ratio sweeps for Theorems 1(i), 2 and 3.
    Stability,
    /// Run every stage in order.
    All,
}

fn run(cli: &Cli) -> transport_inverse::Result<bool> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let cfg = ExperimentConfig::from_path(config_path)?;
    let exp = Experiment::resolve(cfg, cli.refine, cli.seed, cli.out.as_deref())?;
    match cli.command {
        Command::Weights => cmd_weights(&exp, cli.quiet),
        Command::Forward => cmd_forward(&exp, cli.quiet),
        Command::Carleman => cmd_carleman(&exp, cli.quiet),
        Command::Invert => cmd_invert(&exp, cli.quiet),
        Command::Stability => cmd_stability(&exp, cli.quiet),
        Command::All => cmd_all(&exp, cli.quiet),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more gates failed");
            ExitCode::from(1)
        }
        Err(e @ (Error::Config(_) | Error::Expr(_))) => {
            eprintln!("{e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(1)
        }
    }
}
