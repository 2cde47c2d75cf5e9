//! `slidegcd` command-line interface: train, eval, infer, sweep, and
//! export-graph over the SlideGCD pipeline.
//!
//! Exit codes: 0 success, 1 runtime/training failure, 2 usage/config error.

mod commands;
mod config;
mod error;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "slidegcd", version, about = "Rehearsal-buffered slide-graph training and inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config; writes model.sgck, metrics.json
    /// and train_log.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a bag manifest or the config's test source;
    /// writes metrics.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict each bag in a manifest, printing class, probabilities and the
    /// query's hyperedge neighbors.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Grid-run training over hyper-parameter lists; one metrics row per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid axis, e.g. --grid k=6,8,10 (repeatable; axes combine as a
        /// cartesian product).
        #[arg(long)]
        grid: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run sweep cells on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Write nodes.tsv/edges.tsv for the checkpoint's buffer graph, plus
    /// optional query bags.
    ExportGraph {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn main() {
    std::process::exit(run());
}

fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Train { config, seed, out } => commands::cmd_train(config, *seed, out.as_deref()),
        Cmd::Eval { checkpoint, config, manifest, out } => {
            commands::cmd_eval(checkpoint, config.as_deref(), manifest.as_deref(), out.as_deref())
        }
        Cmd::Infer { checkpoint, manifest } => commands::cmd_infer(checkpoint, manifest),
        Cmd::Sweep { config, grid, seed, out, parallel } => {
            commands::cmd_sweep(config, grid, *seed, out.as_deref(), *parallel)
        }
        Cmd::ExportGraph { checkpoint, out, manifest } => {
            commands::cmd_export_graph(checkpoint, out.as_deref(), manifest.as_deref())
        }
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            if e.exit_code() == 2 {
                eprintln!("run `slidegcd --help` for usage");
            }
            e.exit_code()
        }
    }
}
