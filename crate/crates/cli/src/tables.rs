//! Row types of the CSV outputs.

use fdm_core::degradation::Source;
use fdm_core::pipeline::CyclePrediction;
use fdm_core::{FdmModel, UnitPrediction};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub unit_id: String,
    pub cycle: u32,
    pub source: Source,
    pub first_test: u32,
    pub first_norm: f64,
    pub eod_obs: f64,
    pub eod_hat: f64,
    pub norm_obs: f64,
    pub norm_hat: f64,
    pub d_obs: f64,
    pub d_hat: f64,
    pub curve_ise: f64,
}

pub fn prediction_rows(units: &[UnitPrediction]) -> Vec<PredictionRow> {
    units
        .iter()
        .flat_map(|u| {
            u.cycles.iter().map(move |c| PredictionRow {
                unit_id: u.unit_id.clone(),
                cycle: c.cycle,
                source: c.source,
                first_test: u.first_test,
                first_norm: u.first_norm,
                eod_obs: c.eod_obs,
                eod_hat: c.eod_hat,
                norm_obs: c.norm_obs,
                norm_hat: c.norm_hat,
                d_obs: c.d_obs,
                d_hat: c.d_hat,
                curve_ise: c.curve_ise,
            })
        })
        .collect()
}

/// Regroup rows by unit, keeping the order of first appearance.
pub fn units_from_rows(rows: Vec<PredictionRow>) -> Vec<UnitPrediction> {
    let mut out: Vec<UnitPrediction> = Vec::new();
    for r in rows {
        let c = CyclePrediction {
            cycle: r.cycle,
            source: r.source,
            eod_obs: r.eod_obs,
            eod_hat: r.eod_hat,
            norm_obs: r.norm_obs,
            norm_hat: r.norm_hat,
            d_obs: r.d_obs,
            d_hat: r.d_hat,
            curve_ise: r.curve_ise,
        };
        match out.iter_mut().find(|u| u.unit_id == r.unit_id) {
            Some(u) => u.cycles.push(c),
            None => out.push(UnitPrediction {
                unit_id: r.unit_id,
                first_test: r.first_test,
                first_norm: r.first_norm,
                cycles: vec![c],
            }),
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CoefficientRow {
    /// `eod`, or `score_k` for component k of the score model.
    pub block: String,
    pub term: String,
    pub estimate: f64,
    pub std_error: f64,
    pub z_value: f64,
}

pub fn coefficient_rows(model: &FdmModel) -> Vec<CoefficientRow> {
    let row = |block: String, term: &str, estimate: f64, se: f64| CoefficientRow {
        block,
        term: term.to_string(),
        estimate,
        std_error: se,
        z_value: estimate / se,
    };
    let mut out: Vec<CoefficientRow> = model
        .eod
        .coef_names()
        .iter()
        .zip(model.eod.coefficients())
        .zip(model.eod.std_errors())
        .map(|((n, &b), &se)| row("eod".into(), n, b, se))
        .collect();
    let m = &model.mlmm;
    let se = m.std_errors();
    let mut terms = vec!["(Intercept)".to_string(), "cycle".to_string()];
    terms.extend(m.covariate_names.iter().cloned());
    for comp in 0..m.k {
        for (col, term) in terms.iter().enumerate() {
            let est = match col {
                0 => m.v0[comp],
                1 => m.v1[comp],
                h => m.p[comp][h - 2],
            };
            out.push(row(format!("score_{}", comp + 1), term, est, se[col * m.k + comp]));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct PathRow {
    pub unit_id: String,
    pub cycle: u32,
    pub source: Source,
    pub d: f64,
    pub eod: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub exceeds_threshold: bool,
}

pub fn path_rows(paths: &[fdm_core::DegradationPath]) -> Vec<PathRow> {
    paths
        .iter()
        .flat_map(|p| {
            p.entries.iter().map(move |e| PathRow {
                unit_id: p.unit_id.clone(),
                cycle: e.cycle,
                source: e.source,
                d: e.d,
                eod: e.eod,
                lower: e.lower,
                upper: e.upper,
                exceeds_threshold: e.exceeds_threshold,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastRow {
    pub unit_id: String,
    pub cycle: u32,
    pub rest_hours: f64,
    pub eod: f64,
    pub norm: f64,
    pub d: f64,
    pub exceeds_threshold: bool,
}

/// One grid point of a predicted curve; `time_s` is the natural-domain time t·EOD.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePointRow {
    pub unit_id: String,
    pub cycle: u32,
    pub t: f64,
    pub time_s: f64,
    pub voltage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionRow {
    pub t: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricRow {
    pub quantity: String,
    pub rmse: f64,
    pub rmspe: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverageRow {
    pub level: f64,
    pub coverage: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BetaRow {
    pub cell: usize,
    pub replicate: usize,
    pub t: f64,
    pub beta: f64,
}
