//! Config file sections and the flag overrides applied on top of them.

use std::path::Path;

use anyhow::{bail, Context, Result};
use fdm_core::{
    BootstrapConfig, EodFormula, ExperimentGrid, FpcaOptions, PipelineConfig, SimulationConfig, Smoothing,
};
use fdm_core::fpca::ComponentSelection;
use serde::{Deserialize, Serialize};

use crate::{ExperimentArgs, ModelArgs, SimulateArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Simulation,
    Battery,
}

/// Every section is optional; commands read the ones they need.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub pipeline: Option<PipelineConfig>,
    pub simulation: Option<SimulationConfig>,
    pub experiment: Option<ExperimentGrid>,
    pub bootstrap: Option<BootstrapConfig>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub fn pipeline(file: &FileConfig, args: &ModelArgs, seed: u64) -> Result<PipelineConfig> {
    let kind = args.model.unwrap_or(fdm_core::EodKind::Lme);
    let mut cfg = match (&file.pipeline, args.preset) {
        (Some(p), None) => p.clone(),
        (Some(_), Some(_)) => bail!("--preset conflicts with the pipeline section of the config file"),
        (None, Some(Preset::Battery)) => PipelineConfig::battery(kind),
        (None, _) => PipelineConfig::simulation(kind),
    };
    if let Some(m) = args.model {
        cfg.eod_model = m;
    }
    if let Some(f) = &args.formula {
        let formula: EodFormula = f.parse().context("--formula")?;
        match cfg.eod_model {
            fdm_core::EodKind::Lme => cfg.lme_formula = formula,
            fdm_core::EodKind::Flmm => cfg.flmm_formula = formula,
        }
    }
    if let Some(t) = args.train_ratio {
        cfg.train_ratio = t;
    }
    if let Some(p) = args.norm_order {
        cfg.norm_order = p;
    }
    if args.threshold.is_some() {
        cfg.threshold = args.threshold;
    }
    if let Some(k) = args.components {
        cfg.fpca = FpcaOptions {
            selection: ComponentSelection::Fixed(k),
            ..cfg.fpca
        };
    }
    if let (Some(lambda_beta), Some(lambda_b)) = (args.lambda_beta, args.lambda_b) {
        cfg.flmm.smoothing = Smoothing::Fixed { lambda_beta, lambda_b };
    }
    if let Smoothing::CrossValidate { seed: s, .. } = &mut cfg.flmm.smoothing {
        *s = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn simulation(file: &FileConfig, args: &SimulateArgs, seed: u64) -> Result<SimulationConfig> {
    let mut cfg = file.simulation.clone().unwrap_or_default();
    if let Some(n) = args.units {
        cfg.n_units = n;
    }
    if let Some(n) = args.cycles {
        cfg.n_cycles = n;
    }
    if let Some(m) = args.model {
        cfg.model = m;
    }
    if let Some(g) = args.grid_size {
        cfg.grid_size = g;
    }
    cfg.replications = args.replications;
    cfg.seed = seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn experiment(file: &FileConfig, args: &ExperimentArgs, seed: u64) -> Result<ExperimentGrid> {
    let mut g = match (&file.experiment, args.full) {
        (Some(_), true) => bail!("--full conflicts with the experiment section of the config file"),
        (Some(g), false) => g.clone(),
        (None, true) => ExperimentGrid::full(),
        (None, false) => ExperimentGrid::desk(),
    };
    if let Some(v) = &args.units {
        g.n_units = v.clone();
    }
    if let Some(v) = &args.cycles {
        g.n_cycles = v.clone();
    }
    if let Some(v) = &args.train_ratios {
        g.train_ratios = v.clone();
    }
    if let Some(v) = &args.models {
        g.models = v.clone();
    }
    if let Some(v) = &args.methods {
        g.methods = v.clone();
    }
    if let Some(r) = args.replications {
        g.replications = r;
    }
    if let Some(n) = args.grid_size {
        g.grid_size = n;
    }
    g.seed = seed;
    if let Smoothing::CrossValidate { seed: s, .. } = &mut g.pipeline.flmm.smoothing {
        *s = seed;
    }
    g.validate()?;
    Ok(g)
}

pub fn bootstrap(
    file: &FileConfig,
    replicates: Option<usize>,
    levels: Option<&[f64]>,
    per_prediction: bool,
    seed: u64,
) -> Result<BootstrapConfig> {
    let mut b = file.bootstrap.clone().unwrap_or_default();
    if let Some(r) = replicates {
        b.replicates = r;
    }
    if let Some(l) = levels {
        b.levels = l.to_vec();
    }
    b.per_prediction_residuals |= per_prediction;
    b.seed = seed;
    Ok(b)
}
