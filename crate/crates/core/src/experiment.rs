//! Factorial simulation study: every cell of the (units × cycles × train
//! ratio × data model) grid is replicated, each replicate fits the chosen
//! methods and records their errors.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eod::EodKind;
use crate::error::{Error, Result};
use crate::pipeline::{evaluate, run_fdm_pipeline, run_gpm_pipeline, EodFit, PipelineConfig};
use crate::simulator::{generate_dataset, SimulationConfig, SimulationParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Gpm,
    FdmLme,
    FdmFlmm,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Gpm => "gpm",
            MethodKind::FdmLme => "fdm-lme",
            MethodKind::FdmFlmm => "fdm-flmm",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MethodKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gpm" => Ok(MethodKind::Gpm),
            "fdm-lme" | "lme" => Ok(MethodKind::FdmLme),
            "fdm-flmm" | "flmm" => Ok(MethodKind::FdmFlmm),
            other => Err(Error::invalid(format!("unknown method `{other}` (gpm, fdm-lme, fdm-flmm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentGrid {
    pub n_units: Vec<usize>,
    pub n_cycles: Vec<usize>,
    pub train_ratios: Vec<f64>,
    pub models: Vec<EodKind>,
    pub replications: usize,
    pub seed: u64,
    pub methods: Vec<MethodKind>,
    pub grid_size: usize,
    pub params: SimulationParams,
    /// Model settings; the EOD model and train ratio are set per method and cell.
    pub pipeline: PipelineConfig,
    /// Keep β̂ on the grid for every functional fit.
    pub keep_beta: bool,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentGrid {
    /// The full study: 3 × 3 × 2 × 2 cells, 100 replicates each.
    pub fn full() -> Self {
        Self {
            n_units: vec![20, 50, 100],
            n_cycles: vec![50, 100, 150],
            train_ratios: vec![0.5, 0.8],
            replications: 100,
            ..Self::desk()
        }
    }

    /// One small cell (20 units, 50 cycles, 80% training), 20 replicates.
    pub fn desk() -> Self {
        Self {
            n_units: vec![20],
            n_cycles: vec![50],
            train_ratios: vec![0.8],
            models: vec![EodKind::Lme, EodKind::Flmm],
            replications: 20,
            seed: 1,
            methods: vec![MethodKind::Gpm, MethodKind::FdmLme, MethodKind::FdmFlmm],
            grid_size: 300,
            params: SimulationParams::default(),
            pipeline: PipelineConfig::default(),
            keep_beta: true,
        }
    }

    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for &n in &self.n_units {
            for &ni in &self.n_cycles {
                for &tr in &self.train_ratios {
                    for &model in &self.models {
                        out.push(Cell {
                            index: out.len(),
                            n_units: n,
                            n_cycles: ni,
                            train_ratio: tr,
                            model,
                        });
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells().is_empty() {
            return Err(Error::invalid("experiment grid has no cells"));
        }
        if self.replications == 0 || self.methods.is_empty() {
            return Err(Error::invalid("experiment needs at least one replicate and one method"));
        }
        for c in self.cells() {
            c.simulation(self).validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub n_units: usize,
    pub n_cycles: usize,
    pub train_ratio: f64,
    pub model: EodKind,
}

impl Cell {
    pub fn simulation(&self, grid: &ExperimentGrid) -> SimulationConfig {
        SimulationConfig {
            n_units: self.n_units,
            n_cycles: self.n_cycles,
            train_ratio: self.train_ratio,
            model: self.model,
            replications: grid.replications,
            seed: grid.seed,
            grid_size: grid.grid_size,
            params: grid.params.clone(),
        }
    }
}

/// One metric of one method on one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub cell: usize,
    pub n_units: usize,
    pub n_cycles: usize,
    pub train_ratio: f64,
    pub data_model: EodKind,
    pub replicate: usize,
    pub method: MethodKind,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub cell: usize,
    pub replicate: usize,
    pub method: MethodKind,
    pub error: String,
}

/// β̂ of one functional fit on the estimation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaSample {
    pub cell: usize,
    pub replicate: usize,
    pub values: Vec<f64>,
}

/// Distribution summary of one metric for one method in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cell: usize,
    pub method: MethodKind,
    pub metric: String,
    pub count: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub mean: f64,
    pub failures: usize,
    /// More than 5% of this method's replicates failed.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub cells: Vec<Cell>,
    pub rows: Vec<ResultRow>,
    pub failures: Vec<Failure>,
    pub beta: Vec<BetaSample>,
    /// Resampled EOD noise draws while generating the data, summed over replicates.
    pub resampled_draws: usize,
}

impl ExperimentResult {
    pub fn values(&self, cell: usize, method: MethodKind, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.cell == cell && r.method == method && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// Per-replicate values keyed by replicate index.
    pub fn by_replicate(&self, cell: usize, method: MethodKind, metric: &str) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.cell == cell && r.method == method && r.metric == metric)
            .map(|r| (r.replicate, r.value))
            .collect()
    }

    pub fn summaries(&self, replications: usize) -> Vec<Summary> {
        let mut keys: Vec<(usize, MethodKind, String)> = Vec::new();
        for r in &self.rows {
            let k = (r.cell, r.method, r.metric.clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        keys.into_iter()
            .map(|(cell, method, metric)| {
                let mut v = self.values(cell, method, &metric);
                v.sort_by(f64::total_cmp);
                let failures = self
                    .failures
                    .iter()
                    .filter(|f| f.cell == cell && f.method == method)
                    .count();
                Summary {
                    cell,
                    method,
                    count: v.len(),
                    median: crate::bootstrap::quantile_sorted(&v, 0.5),
                    q25: crate::bootstrap::quantile_sorted(&v, 0.25),
                    q75: crate::bootstrap::quantile_sorted(&v, 0.75),
                    mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
                    failures,
                    flagged: failures as f64 > 0.05 * replications as f64,
                    metric,
                }
            })
            .collect()
    }
}

fn pairs(prefix: &str, p: crate::degradation::ErrorPair) -> [(String, f64); 2] {
    [(format!("{prefix}_rmse"), p.rmse), (format!("{prefix}_rmspe"), p.rmspe)]
}

struct ReplicateOutcome {
    rows: Vec<ResultRow>,
    failures: Vec<Failure>,
    beta: Option<BetaSample>,
    resampled: usize,
}

fn run_replicate(grid: &ExperimentGrid, cell: &Cell, replicate: usize) -> ReplicateOutcome {
    let mut out = ReplicateOutcome {
        rows: Vec::new(),
        failures: Vec::new(),
        beta: None,
        resampled: 0,
    };
    let fail = |out: &mut ReplicateOutcome, method, e: &Error| {
        out.failures.push(Failure {
            cell: cell.index,
            replicate,
            method,
            error: e.to_string(),
        })
    };
    let sim = match generate_dataset(&cell.simulation(grid), cell.index as u64, replicate as u64) {
        Ok(s) => s,
        Err(e) => {
            for &m in &grid.methods {
                fail(&mut out, m, &e);
            }
            return out;
        }
    };
    out.resampled = sim.truth.resampled_draws;
    let row = |method, metric: String, value| ResultRow {
        cell: cell.index,
        n_units: cell.n_units,
        n_cycles: cell.n_cycles,
        train_ratio: cell.train_ratio,
        data_model: cell.model,
        replicate,
        method,
        metric,
        value,
    };
    for &method in &grid.methods {
        let mut cfg = grid.pipeline.clone();
        cfg.train_ratio = cell.train_ratio;
        let metrics: Result<Vec<(String, f64)>> = match method {
            MethodKind::Gpm => run_gpm_pipeline(&sim.dataset, &cfg)
                .and_then(|g| g.degradation_errors())
                .map(|p| pairs("degradation", p).to_vec()),
            MethodKind::FdmLme | MethodKind::FdmFlmm => {
                cfg.eod_model = if method == MethodKind::FdmLme { EodKind::Lme } else { EodKind::Flmm };
                run_fdm_pipeline(&sim.dataset, &cfg).and_then(|o| {
                    if let (true, EodFit::Flmm(f)) = (grid.keep_beta, &o.model.eod) {
                        out.beta = Some(BetaSample {
                            cell: cell.index,
                            replicate,
                            values: f.beta_on_grid(),
                        });
                    }
                    let e = evaluate(&o.units)?;
                    let mut m = pairs("degradation", e.degradation).to_vec();
                    m.extend(pairs("eod", e.eod));
                    m.extend(pairs("curve", e.curve));
                    Ok(m)
                })
            }
        };
        match metrics {
            Ok(m) => out.rows.extend(m.into_iter().map(|(k, v)| row(method, k, v))),
            Err(e) => fail(&mut out, method, &e),
        }
    }
    out
}

/// Run every replicate of every cell; replicates run concurrently and the
/// result order is fixed (cell, replicate, method).
pub fn run_experiment(grid: &ExperimentGrid) -> Result<ExperimentResult> {
    grid.validate()?;
    let cells = grid.cells();
    let jobs: Vec<(Cell, usize)> = cells
        .iter()
        .flat_map(|c| (0..grid.replications).map(move |r| (*c, r)))
        .collect();
    let outcomes: Vec<ReplicateOutcome> = jobs
        .par_iter()
        .map(|(c, r)| run_replicate(grid, c, *r))
        .collect();
    let mut res = ExperimentResult {
        cells,
        rows: Vec::new(),
        failures: Vec::new(),
        beta: Vec::new(),
        resampled_draws: 0,
    };
    for o in outcomes {
        res.rows.extend(o.rows);
        res.failures.extend(o.failures);
        res.beta.extend(o.beta);
        res.resampled_draws += o.resampled;
    }
    Ok(res)
}
