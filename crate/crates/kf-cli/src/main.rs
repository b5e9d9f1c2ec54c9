//! `kf` — generate feedback datasets, train surrogate controllers, and run
//! the particle / mean-field simulations from one validated configuration.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use config::CliError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "kf",
    about = "Kinetic feedback-control toolkit: datasets, surrogate training, and simulations",
    after_help = config::CONFIG_KEY_HELP,
    version
)]
struct Cli {
    /// Configuration file (TOML); exclusive with --preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Bundled configuration: test1, test2, or test3.
    #[arg(long, global = true, value_name = "NAME")]
    preset: Option<String>,

    /// Cap engine parallelism (defaults to the available cores); the
    /// effective value is recorded in every manifest.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Trailing `key=value` pairs override single configuration keys.
#[derive(clap::Args)]
struct Overrides {
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample pair states and their synthesized feedback into a dataset CSV.
    GenData(Overrides),
    /// Train a surrogate network on a generated dataset.
    Train(Overrides),
    /// Train every candidate architecture and keep the best one.
    Tune(Overrides),
    /// Run the particle Monte Carlo simulation.
    Simulate {
        /// Override kinetic.controller for this run.
        #[arg(long, value_name = "NAME")]
        controller: Option<String>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Solve the one-dimensional opinion mean-field equation.
    Mf1d(Overrides),
    /// Verify the synthesis chain against closed-form and brute-force checks.
    Oracle(Overrides),
    /// Time controllers across ensemble sizes and dimensions.
    Bench(Overrides),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Tune(_) => "tune",
            Command::Simulate { .. } => "simulate",
            Command::Mf1d(_) => "mf1d",
            Command::Oracle(_) => "oracle",
            Command::Bench(_) => "bench",
        }
    }

    fn overrides(&self) -> &[String] {
        match self {
            Command::GenData(o)
            | Command::Train(o)
            | Command::Tune(o)
            | Command::Mf1d(o)
            | Command::Oracle(o)
            | Command::Bench(o) => &o.overrides,
            Command::Simulate { rest, .. } => &rest.overrides,
        }
    }
}

/// Apply --threads before any parallel work starts and report the effective
/// engine parallelism.
fn effective_threads(flag: Option<usize>) -> Result<usize, CliError> {
    if let Some(t) = flag {
        if t == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        std::env::set_var("RAYON_NUM_THREADS", t.to_string());
        return Ok(t);
    }
    if let Ok(v) = std::env::var("RAYON_NUM_THREADS") {
        if let Ok(t) = v.parse::<usize>() {
            if t > 0 {
                return Ok(t);
            }
        }
    }
    Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let threads = effective_threads(cli.threads)?;
    let cfg = config::resolve(
        cli.preset.as_deref(),
        cli.config.as_deref(),
        cli.command.overrides(),
    )?;
    match &cli.command {
        Command::GenData(_) => commands::cmd_gen_data(&cfg, threads),
        Command::Train(_) => commands::cmd_train(&cfg, threads),
        Command::Tune(_) => commands::cmd_tune(&cfg, threads),
        Command::Simulate { controller, .. } => {
            commands::cmd_simulate(&cfg, controller.as_deref(), threads)
        }
        Command::Mf1d(_) => commands::cmd_mf1d(&cfg, threads),
        Command::Oracle(_) => commands::cmd_oracle(&cfg, threads),
        Command::Bench(_) => commands::cmd_bench(&cfg, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("kf {}: {e}", cli.command.name());
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("kf {}: {e}", cli.command.name());
            ExitCode::from(3)
        }
    }
}
