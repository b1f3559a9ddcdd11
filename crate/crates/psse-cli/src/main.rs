//! Command-line front end for the state-estimation toolkit.
//!
//! Exit codes: 0 on success, 2 on flag/usage errors (clap's default), 1 on
//! runtime failures, which are also reported as a JSON object on stderr.

mod commands;
mod config;
mod reports;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "psse",
    version,
    about = "Power system state estimation and forecasting pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Seed for every random stage of the command (default 0, or the
    /// config file's `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Flat TOML config file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all output artifacts.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolveMethod {
    ProxLinear,
    GaussNewton,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PsseModel {
    Proxnet,
    Fnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForecastModelKind {
    Rnn,
    Var1,
    Fnn2,
}

#[derive(Subcommand)]
pub enum Command {
    /// Parse a MATPOWER-style case (path or builtin name) into grid JSON.
    ParseCase {
        /// Case file path, or a builtin name (case14, case57).
        case: String,
    },
    /// Solve the AC power flow and write the solution.
    Powerflow {
        case: String,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
        #[arg(long, default_value_t = 20)]
        max_iter: usize,
        /// Start from a flat profile instead of the case voltages.
        #[arg(long)]
        flat_start: bool,
    },
    /// Generate a time series of measurement/state pairs.
    GenData {
        case: String,
        /// Number of samples (default 1000).
        #[arg(long)]
        length: Option<usize>,
        /// Load profile: sinusoid | random-walk (default sinusoid).
        #[arg(long)]
        profile: Option<String>,
        /// Ingest loads from a CSV file instead of synthesizing them.
        #[arg(long)]
        load_csv: Option<PathBuf>,
        /// JSON column map for --load-csv.
        #[arg(long)]
        col_map: Option<PathBuf>,
        /// Keep every k-th CSV row.
        #[arg(long)]
        subsample: Option<usize>,
        /// Also measure nodal injections.
        #[arg(long)]
        include_injections: bool,
        #[arg(long)]
        sigma_flow: Option<f64>,
        #[arg(long)]
        sigma_mag: Option<f64>,
    },
    /// Estimate states for dataset samples with a classical solver.
    Solve {
        #[arg(long)]
        dataset: PathBuf,
        /// Grid JSON (defaults to grid.json next to the dataset).
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: SolveMethod,
        /// First sample to solve.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Number of samples (default: all remaining).
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train an estimator network mapping measurements to states.
    TrainPsse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: PsseModel,
        /// Hidden layers for the FNN baseline (default 6).
        #[arg(long)]
        hidden_layers: Option<usize>,
        /// Unrolled outer blocks for the prox-linear net (default 2).
        #[arg(long)]
        blocks: Option<usize>,
        /// Layers per block (default 3).
        #[arg(long)]
        layers_per_block: Option<usize>,
        /// Samples used for training (default 80%).
        #[arg(long)]
        train_count: Option<usize>,
        /// proxnet initialization: tied | random (default tied).
        #[arg(long)]
        init: Option<String>,
        /// Gaussian scale added to the tied initialization.
        #[arg(long, default_value_t = 0.0)]
        perturb: f64,
        /// Activation: relu | soft-threshold (default relu).
        #[arg(long)]
        activation: Option<String>,
    },
    /// Evaluate an estimator checkpoint on held-out samples.
    EvalPsse {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// First test sample (default 80% of the dataset).
        #[arg(long)]
        test_start: Option<usize>,
        /// Sample index for the per-bus error export.
        #[arg(long)]
        instance: Option<usize>,
    },
    /// Train a one-step state forecaster.
    TrainForecast {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_enum)]
        model: ForecastModelKind,
        /// Lagged states per window (default 10).
        #[arg(long)]
        window: Option<usize>,
        /// Recurrent layers (default 3).
        #[arg(long)]
        layers: Option<usize>,
        /// Train on solver-estimated voltages instead of ground truth.
        #[arg(long)]
        use_estimates: bool,
        #[arg(long)]
        train_count: Option<usize>,
    },
    /// Evaluate a forecaster checkpoint.
    EvalForecast {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        test_start: Option<usize>,
        #[arg(long)]
        instance: Option<usize>,
    },
    /// Closed-loop monitoring: estimate, forecast, impute missing readings.
    Monitor {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Probability each measurement is missing per step.
        #[arg(long, default_value_t = 0.1)]
        mask_rate: f64,
        /// `var1` (fitted on the warmup span) or an RNN checkpoint path.
        #[arg(long, default_value = "var1")]
        forecaster: String,
        /// `solver` or a prox-linear-net checkpoint path.
        #[arg(long, default_value = "solver")]
        estimator: String,
        /// First monitored sample (default 50%).
        #[arg(long)]
        start: Option<usize>,
        /// One past the last monitored sample (default: dataset end).
        #[arg(long)]
        end: Option<usize>,
    },
    /// Compare per-sample inference cost of the network estimator against
    /// the Gauss-Newton solver.
    Bench {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Network checkpoint (default: a solver-tied network).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        samples: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<psse::Error>()
                .map(|e| e.kind())
                .unwrap_or("runtime");
            let payload = serde_json::json!({
                "error": { "kind": kind, "message": format!("{err:#}") }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
