// SPDX-License-Identifier: Apache-2.0

//! `fwtrace`: train a model, precompute influence imprints, score queries
//! with forward passes only, and evaluate the scores against retraining.
//!
//! Exit codes: 0 ok, 1 other failure, 2 configuration, 3 stale artifact,
//! 4 undefined metric, 5 numerical instability.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fwtrace_core::Variant;

use commands::{EvalMode, Globals, Run, Selection};
use config::Overrides;

#[derive(Parser, Debug)]
#[command(name = "fwtrace", version, about = "Forward-only training-data attribution")]
struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true, default_value = "fwtrace.toml")]
    config: PathBuf,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Inner-loop step size.
    #[arg(long, global = true)]
    eta: Option<f64>,

    /// Inner-loop length T.
    #[arg(long, global = true)]
    steps: Option<u64>,

    /// Damping toward the trained parameters.
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// Up-weighting magnitude.
    #[arg(long, global = true)]
    epsilon: Option<f64>,

    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,

    /// Subtract an unperturbed twin trajectory.
    #[arg(long, global = true)]
    drift_correction: bool,

    /// Report scores divided by N.
    #[arg(long, global = true)]
    per_example: bool,

    /// Refuse configurations whose inner loop is not contractive.
    #[arg(long, global = true)]
    strict: bool,

    /// Refuse work estimated above this many gradient evaluations.
    #[arg(long, global = true)]
    budget: Option<u64>,

    #[arg(long, global = true, env = "FWTRACE_WORKERS", default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Materialize the configured dataset.
    Ingest,
    /// Train to the gradient tolerance and write the checkpoint.
    Train,
    /// Simulate imprints into the store.
    Simulate {
        /// Comma-separated training ids.
        #[arg(long, value_delimiter = ',')]
        ids: Option<Vec<u64>>,
        /// File of training ids separated by whitespace or commas.
        #[arg(long, conflicts_with = "ids")]
        all_sources: Option<PathBuf>,
    },
    /// Score every stored imprint against the queries.
    Attribute {
        #[arg(long)]
        store: Option<PathBuf>,
        /// JSON array of queries; the dataset's held-out queries by default.
        #[arg(long)]
        queries: Option<PathBuf>,
    },
    /// Compare a score table with retraining or the influence oracle.
    Evaluate {
        #[arg(long, value_enum)]
        mode: EvalMode,
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Run a hyperparameter grid.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn run(cli: Cli) -> fwtrace_core::Result<()> {
    let globals = Globals {
        config: cli.config,
        overrides: Overrides {
            seed: cli.seed,
            eta: cli.eta,
            steps: cli.steps,
            lambda: cli.lambda,
            epsilon: cli.epsilon,
            variant: cli.variant,
            drift_correction: cli.drift_correction,
        },
        per_example: cli.per_example,
        strict: cli.strict,
        budget: cli.budget,
        workers: cli.workers.max(1),
    };
    let run = Run::open(globals)?;
    match cli.command {
        Command::Ingest => commands::ingest(&run),
        Command::Train => commands::train(&run),
        Command::Simulate { ids, all_sources } => commands::simulate(
            &run,
            &Selection {
                ids,
                ids_file: all_sources,
            },
        ),
        Command::Attribute { store, queries } => commands::attribute(&run, store.as_deref(), queries.as_deref()),
        Command::Evaluate { mode, scores } => commands::evaluate(&run, mode, scores.as_deref()),
        Command::Sweep { grid } => commands::sweep_cmd(&run, &grid),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
