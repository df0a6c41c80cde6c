//! `mergelab`: manifest-driven front end for task generation, fine-tuning,
//! merging, bound evaluation, stability measurement and sweeps.
//!
//! Exit codes: 0 on success, 1 on usage or validation errors, 2 when a
//! fine-tune diverged or more than half of a sweep's cells collapsed.

mod commands;
mod suite;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "mergelab",
    version,
    about = "Model-merging stability experiments"
)]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides every seed in the input manifest.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a task family: manifest.json, base.bin, task_<i>.json, tasks.csv.
    GenTasks {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Fine-tune the base on one task; writes the expert and `<out>.json`.
    Finetune {
        task: PathBuf,
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Merge experts into the base; writes the model and `<out>.json`.
    Merge {
        spec: PathBuf,
        base: PathBuf,
        #[arg(required = true)]
        experts: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        /// Task files, one per expert (adaptive merges only).
        #[arg(long, num_args = 1..)]
        tasks: Vec<PathBuf>,
    },
    /// Evaluate the excess-error bound; prints the breakdown as JSON.
    Bound {
        inputs: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Measure on-average model stability and compare it with its bound.
    Stability {
        suite: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run a hyperparameter sweep; writes the report and a CSV beside it.
    Sweep {
        manifest: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// CSV path (defaults to the report path with a `.csv` extension).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Re-emit a sweep report as CSV and print its trend summary.
    Report {
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command, cli.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
