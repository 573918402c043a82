//! `pmdm`: train, evaluate, forecast with and benchmark the memory-network
//! traffic forecaster.
//!
//! Exit codes: 0 on success, 1 for usage, configuration or data errors, 2 when
//! training or inference produces non-finite numbers.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pmdm_core::bench::BenchConfig;
use pmdm_core::data::{SplitSpec, SynthConfig};
use pmdm_core::dpmgru::GateKind;

use commands::Part;
use config::{Overrides, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "pmdm", version, about = "Pattern-matching memory network traffic forecaster")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write checkpoint.pmdm, model.json, run.json,
    /// history.csv, eval.csv and eval_overall.csv under the output directory
    Train {
        /// JSON run configuration; flags below override its keys
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score a checkpoint on a dataset and write eval.csv and eval_overall.csv
    Eval {
        /// Checkpoint file; model.json must sit beside it
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        /// Dataset directory
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Train/validation/test proportions used to pick the windows
        #[arg(long, default_value = "7/1/2", value_parser = parse_split)]
        split: SplitSpec,
        /// Which part of the split to score
        #[arg(long, value_enum, default_value = "test")]
        windows: Part,
        /// Windows per forward pass
        #[arg(long = "batch-size", default_value_t = 64)]
        batch_size: usize,
        /// Output directory (defaults to the checkpoint's directory)
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Forecast the m steps after a point in the dataset and write predict.csv
    Predict {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Timestamp of the first forecast step (default: just past the data)
        #[arg(long, value_name = "TIMESTAMP")]
        at: Option<String>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Count multiply-adds and time one recurrent step at several node counts
    Bench {
        /// Comma-separated node counts (at least two)
        #[arg(long, value_delimiter = ',', required = true)]
        sizes: Vec<usize>,
        /// Comma-separated gate kinds: dmn, dgc, affine
        #[arg(long, value_delimiter = ',', default_value = "dmn,dgc", value_parser = parse_kind)]
        kinds: Vec<GateKind>,
        /// Skip timing; the output is then fully deterministic
        #[arg(long = "flops-only")]
        flops_only: bool,
        /// Timed trials per row
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Input channels
        #[arg(long = "C", default_value_t = 1)]
        input: usize,
        /// Hidden width
        #[arg(long = "D", default_value_t = 64)]
        hidden: usize,
        /// Memory and time-embedding width
        #[arg(long, default_value_t = 24)]
        p: usize,
        /// Node-embedding width
        #[arg(long, default_value_t = 12)]
        d: usize,
        /// Memory slots
        #[arg(long = "M", default_value_t = 10)]
        memory_slots: usize,
        /// Directory for bench.csv
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset with planted daily and weekly patterns
    Synth {
        #[arg(long, default_value_t = 8)]
        nodes: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        /// Sampling interval in minutes
        #[arg(long, default_value_t = 30)]
        interval: u32,
        /// Groups of nodes sharing one profile
        #[arg(long, default_value_t = 2)]
        clusters: usize,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        /// Standard deviation of the additive noise
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Timestamp of the first step
        #[arg(long, default_value = "2024-01-01T00:00")]
        start: String,
        /// Dataset directory to write
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Write node embeddings, memory matrices and time pools as CSV files
    /// under <out>/embeddings
    ExportEmbeddings {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<SplitSpec, String> {
    s.parse().map_err(|e: pmdm_core::Error| e.to_string())
}

fn parse_kind(s: &str) -> Result<GateKind, String> {
    match s.trim() {
        "dmn" => Ok(GateKind::Dmn),
        "dgc" => Ok(GateKind::Dgc),
        "affine" => Ok(GateKind::Affine),
        other => Err(format!("unknown gate kind `{other}` (expected dmn, dgc or affine)")),
    }
}

fn run(command: Command) -> error::Result<()> {
    match command {
        Command::Train { config, overrides } => {
            let config = RunConfig::resolve(config.as_deref(), &overrides)?;
            commands::train(&config)
        }
        Command::Eval {
            checkpoint,
            dataset,
            split,
            windows,
            batch_size,
            out,
        } => commands::eval(&commands::EvalArgs {
            checkpoint: &checkpoint,
            dataset: &dataset,
            split: &split,
            part: windows,
            batch_size,
            out: out.as_deref(),
        }),
        Command::Predict {
            checkpoint,
            dataset,
            at,
            out,
        } => commands::predict(&commands::PredictArgs {
            checkpoint: &checkpoint,
            dataset: &dataset,
            at: at.as_deref(),
            out: &out,
        }),
        Command::Bench {
            sizes,
            kinds,
            flops_only,
            trials,
            seed,
            input,
            hidden,
            p,
            d,
            memory_slots,
            out,
        } => {
            let config = BenchConfig {
                dims: commands::flop_dims(input, hidden, p, d, memory_slots),
                trials,
                flops_only,
                seed,
            };
            commands::bench(&sizes, &kinds, &config, out.as_deref())
        }
        Command::Synth {
            nodes,
            days,
            interval,
            clusters,
            channels,
            noise,
            seed,
            start,
            out,
        } => {
            let config = SynthConfig {
                nodes,
                days,
                interval_minutes: interval,
                clusters,
                channels,
                noise,
                seed,
                start,
            };
            commands::synth(&config, &out)
        }
        Command::ExportEmbeddings { checkpoint, out } => commands::export(&checkpoint, &out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
