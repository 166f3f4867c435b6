//! `nilm`: single entry point for data generation, model training and
//! evaluation, the three service tiers, benchmarks, and the demo.
//!
//! Exit codes: 0 success, 2 usage error, 1 runtime failure.

mod commands;
mod data;
mod demo;
mod manifest;
mod serve;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchCmd, DatagenArgs, EvalArgs, TrainArgs};
use demo::DemoArgs;

#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or config: exit code 2.
    Usage(String),
    /// Failure during execution: exit code 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

macro_rules! runtime_from {
    ($($ty:ty),*) => {$(
        impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Runtime(anyhow::Error::new(e))
            }
        }
    )*};
}
runtime_from!(
    nilm_core::CoreError,
    nilm_gbdt::GbdtError,
    nilm_seq2point::S2pError,
    nilm_bench::BenchError,
    std::io::Error
);

#[derive(Debug, Parser)]
#[command(name = "nilm", version, about = "Edge-cloud load disaggregation toolkit")]
struct Cli {
    /// Directory for manifests, reports, and other artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Seed for anything stochastic in the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// error | warn | info | debug | trace
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled measurement CSV.
    Datagen(DatagenArgs),
    /// Train a model on an 80/20 chronological split.
    Train(TrainArgs),
    /// Evaluate a trained model against a labeled dataset.
    Eval(EvalArgs),
    /// Run the message broker.
    Broker {
        #[arg(long, default_value = "127.0.0.1:5672")]
        listen: String,
        #[arg(long, default_value_t = nilm_broker::DEFAULT_CAPACITY)]
        default_capacity: usize,
    },
    /// Run one cloud inference worker (REST + optional queue consumer).
    CloudWorker {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the round-robin load balancer.
    Balancer {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the edge agent to input exhaustion.
    EdgeAgent {
        #[arg(long)]
        config: PathBuf,
    },
    /// Load benchmarks against a live endpoint.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Full end-to-end pipeline on synthetic data.
    Demo(DemoArgs),
}

fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Datagen(args) => commands::cmd_datagen(args, &cli.out_dir, cli.seed),
        Command::Train(args) => commands::cmd_train(args, &cli.out_dir, cli.seed),
        Command::Eval(args) => commands::cmd_eval(args, &cli.out_dir, cli.seed),
        Command::Broker { listen, default_capacity } => {
            serve::cmd_broker(listen, *default_capacity, &cli.out_dir, cli.seed)
        }
        Command::CloudWorker { config } => serve::cmd_cloud_worker(config, &cli.out_dir, cli.seed),
        Command::Balancer { config } => serve::cmd_balancer(config, &cli.out_dir, cli.seed),
        Command::EdgeAgent { config } => serve::cmd_edge_agent(config, &cli.out_dir, cli.seed),
        Command::Bench(cmd) => commands::cmd_bench(cmd, &cli.out_dir, cli.seed),
        Command::Demo(args) => demo::cmd_demo(args, &cli.out_dir, cli.seed),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp_millis()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
