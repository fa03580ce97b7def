//! `pfpt`: run federated prompt aggregation simulations, inspect partitions,
//! and aggregate dumped prompt sets.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pfpt", version, about = "Federated prompt aggregation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Configuration file (`key = value` lines with `[section]` headers).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Extra `section.key=value` override; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "pfpt-out")]
    out: PathBuf,
    /// Worker threads for client simulation and matching (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a full federated simulation.
    Simulate(Common),
    /// Partition the class totals across clients and summarise the result.
    Partition(Common),
    /// Aggregate prompt CSV files (one per client) into a global pool once.
    Aggregate {
        #[command(flatten)]
        common: Common,
        /// Prompt CSV files, one per client.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Simulate(c) | Command::Partition(c) => c,
        Command::Aggregate { common, .. } => common,
    };
    let threads = match rayon::ThreadPoolBuilder::new()
        .num_threads(common.workers.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    let outcome = threads.install(|| match &cli.command {
        Command::Simulate(c) => commands::simulate(c),
        Command::Partition(c) => commands::partition(c),
        Command::Aggregate { common, inputs } => commands::aggregate(common, inputs),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}
