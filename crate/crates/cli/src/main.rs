//! `fdm`: batch interface to the functional degradation model.

mod commands;
mod config;
mod output;
mod svg;
mod tables;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "fdm", version, about = "Functional degradation modeling of discharge curves")]
pub struct Cli {
    /// Master seed for every random draw.
    #[arg(long, global = true, env = "FDM_SEED", default_value_t = 1)]
    pub seed: u64,

    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "FDM_THREADS")]
    pub threads: Option<usize>,

    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build the canonical dataset from curve and metadata tables.
    Ingest(IngestArgs),
    /// Fit the score and EOD models on the training cycles.
    Fit(FitArgs),
    /// Fitted and predicted paths for a dataset, optionally forecasting beyond it.
    Predict(PredictArgs),
    /// Generate a synthetic dataset with known truth.
    Simulate(SimulateArgs),
    /// Run the replicated simulation study.
    Experiment(ExperimentArgs),
    /// Bootstrap prediction intervals for degradation amounts.
    Bootstrap(BootstrapArgs),
    /// Error metrics of a predictions table.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Curve table: unit_id, cycle, time_s, voltage.
    #[arg(long)]
    pub curves: PathBuf,
    /// Metadata table: unit_id, temp_C, dc_A, sv_V, cycle, start_timestamp.
    #[arg(long)]
    pub meta: PathBuf,
    #[arg(long, default_value_t = fdm_core::grid::DEFAULT_GRID_SIZE)]
    pub grid_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// Model settings shared by fit and bootstrap.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// Covariate layout: simulation (z) or battery (z1, z2, z3).
    #[arg(long)]
    pub preset: Option<config::Preset>,
    /// EOD model: lme or flmm.
    #[arg(long)]
    pub model: Option<fdm_core::EodKind>,
    /// EOD formula, a preset name or e.g. "random=cycle,prev_eod; fixed=rest,z1".
    #[arg(long)]
    pub formula: Option<String>,
    /// Fraction of each unit's cycles used for training, in (0, 1].
    #[arg(long)]
    pub train_ratio: Option<f64>,
    /// Order p of the L^p norm.
    #[arg(long)]
    pub norm_order: Option<f64>,
    /// Soft-failure threshold on the degradation amount.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Number of functional principal components.
    #[arg(long)]
    pub components: Option<usize>,
    /// Fixed smoothing parameter of the fixed slope function (skips cross-validation).
    #[arg(long, requires = "lambda_b")]
    pub lambda_beta: Option<f64>,
    /// Fixed smoothing parameter of the unit slope functions.
    #[arg(long, requires = "lambda_beta")]
    pub lambda_b: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// model.json written by `fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Forecast this many cycles past each unit's last observed cycle.
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Rest period before every forecast cycle, in hours.
    #[arg(long, default_value_t = 5.0)]
    pub rest_hours: f64,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    pub units: Option<usize>,
    #[arg(long)]
    pub cycles: Option<usize>,
    /// EOD data model: lme or flmm.
    #[arg(long)]
    pub model: Option<fdm_core::EodKind>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Cell index mixed into the seed.
    #[arg(long, default_value_t = 0)]
    pub cell: u64,
    /// First replicate index.
    #[arg(long, default_value_t = 0)]
    pub replicate: u64,
    /// Number of consecutive replicates to write.
    #[arg(long, default_value_t = 1)]
    pub replications: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    /// Start from the full 36-cell grid instead of the desk cell.
    #[arg(long)]
    pub full: bool,
    #[arg(long, value_delimiter = ',')]
    pub units: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub cycles: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub train_ratios: Option<Vec<f64>>,
    /// Data models: lme, flmm.
    #[arg(long, value_delimiter = ',')]
    pub models: Option<Vec<fdm_core::EodKind>>,
    /// Methods: gpm, fdm-lme, fdm-flmm.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<fdm_core::MethodKind>>,
    #[arg(long)]
    pub replications: Option<usize>,
    #[arg(long)]
    pub grid_size: Option<usize>,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BootstrapArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Bootstrap replicates.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Interval levels, e.g. 0.9,0.95.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Draw a new training residual for every prediction.
    #[arg(long)]
    pub per_prediction_residuals: bool,
    /// Also write SVG plots.
    #[arg(long)]
    pub svg: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// predictions.csv written by `predict`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: configuring {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
