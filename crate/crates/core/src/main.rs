use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use epiwane::harness::{execute, parse_config, RunOptions, Subcommand};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    /// One population trajectory and its infection events.
    Simulate,
    /// Deterministic limit on the configured grid.
    Flln,
    /// Driver covariance and sampled fluctuation paths.
    Fclt,
    /// Simulation ensembles for every configured population size.
    Ensemble,
    /// Full acceptance run; exits nonzero if any check fails.
    Verify,
    /// Recompute the fluctuation comparison from stored artifacts.
    Compare,
}

impl From<Command> for Subcommand {
    fn from(c: Command) -> Self {
        match c {
            Command::Simulate => Subcommand::Simulate,
            Command::Flln => Subcommand::Flln,
            Command::Fclt => Subcommand::Fclt,
            Command::Ensemble => Subcommand::Ensemble,
            Command::Verify => Subcommand::Verify,
            Command::Compare => Subcommand::Compare,
        }
    }
}

/// Epidemic model with varying infectivity and waning immunity.
#[derive(Debug, Parser)]
#[command(name = "epiwane", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of logical cores.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EPIWANE_LOG", "warn")).init();
    let cli = Cli::parse();
    let cfg = match parse_config(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOptions {
        out: cli.out,
        seed: cli.seed,
        threads: cli.threads,
    };
    match execute(cli.command.into(), &cfg, &opts) {
        Ok(status) => {
            for line in &status.lines {
                println!("{line}");
            }
            for path in &status.artifacts {
                log::info!("wrote {}", path.display());
            }
            if status.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
