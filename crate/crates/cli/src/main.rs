use std::net::{IpAddr, Ipv4Addr};
use std::path::PathBuf;

use cb2m_cli::{CalibrationMode, RunArgs, SeedList, ServeArgs};
use clap::{Parser, Subcommand};

/// Concept bottleneck memory: detect model mistakes and reuse human
/// interventions. Set CB2M_SEED to override every seed.
#[derive(Parser)]
#[command(name = "cb2m", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// Dataset spec JSON; defaults to the balanced regime.
        #[arg(long, alias = "dataset")]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train a concept bottleneck model into a model directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training hyperparameters JSON.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Calibrate thresholds; reports are written next to the model.
    Calibrate {
        #[arg(long, value_enum)]
        mode: CalibrationMode,
        /// Model directory or model file.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Detection grid JSON (detect mode).
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Run an experiment (or `all`) and write result tables.
    Run {
        #[arg(long)]
        experiment: String,
        /// `0..4` (inclusive), `0..=4`, `1,3,5` or a single seed.
        #[arg(long, default_value = "0..4")]
        seeds: SeedList,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Dataset spec JSON replacing the experiment's default dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Full experiment spec JSON; flags take precedence.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Serve the intervention API.
    Serve {
        /// Model directory or model file; without it inference answers 503.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Memory file; created on the first mutation if missing.
        #[arg(long)]
        memory: Option<PathBuf>,
        /// Service config JSON; defaults to the one next to the model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Include ground-truth concepts in flagged items.
        #[arg(long)]
        oracle_reveal: bool,
    },
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::GenData { spec, out } => cb2m_cli::gen_data(spec.as_deref(), &out),
        Command::Train { data, out, config } => cb2m_cli::train(&data, &out, config.as_deref()),
        Command::Calibrate {
            mode,
            model,
            data,
            grid,
        } => cb2m_cli::calibrate(&model, &data, mode, grid.as_deref()),
        Command::Run {
            experiment,
            seeds,
            out,
            dataset,
            spec,
        } => cb2m_cli::run(RunArgs {
            experiment: &experiment,
            seeds: seeds.0,
            out: &out,
            dataset: dataset.as_deref(),
            spec: spec.as_deref(),
        }),
        Command::Serve {
            model,
            memory,
            config,
            port,
            host,
            oracle_reveal,
        } => cb2m_cli::serve(ServeArgs {
            model: model.as_deref(),
            memory: memory.as_deref(),
            config: config.as_deref(),
            host,
            port,
            oracle_reveal,
        }),
    }
}
