//! End-to-end functional degradation model: split each unit's cycles, fit
//! FPCA, the score model and an EOD model on the training cycles, then
//! reconstruct curves on their natural domains and turn them into
//! degradation amounts for every cycle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{rest_covariate, CycleRecord, Dataset};
use crate::degradation::{self, DegradationPath, ErrorPair, Source};
use crate::eod::{self, EodFormula, EodKind, FutureCycle, LmeEodData, LmeEodFit};
use crate::error::{Error, Result};
use crate::flmm::{self, FlmmEodData, FlmmEodFit, FlmmOptions};
use crate::fpca::{self, FpcaModel, FpcaOptions};
use crate::gpm::{self, GpmFit, GpmFuture, GpmObservation, GpmSpec};
use crate::lmm::LmmOptions;
use crate::mlmm::{MlmmData, MlmmFit};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub eod_model: EodKind,
    pub lme_formula: EodFormula,
    pub flmm_formula: EodFormula,
    /// Unit covariates of the score model.
    pub score_covariates: Vec<String>,
    pub fpca: FpcaOptions,
    pub mlmm: LmmOptions,
    pub lme: LmmOptions,
    pub flmm: FlmmOptions,
    /// Fraction of each unit's cycles used for training; 1 trains on everything.
    pub train_ratio: f64,
    /// Order of the L^p norm.
    pub norm_order: f64,
    pub threshold: Option<f64>,
    /// Covariates of the path-model baseline besides cycle, lag and rest.
    pub gpm: GpmSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::simulation(EodKind::Lme)
    }
}

impl PipelineConfig {
    /// Covariate layout of the simulated data.
    pub fn simulation(eod_model: EodKind) -> Self {
        Self {
            eod_model,
            lme_formula: EodFormula::simulation_lme(),
            flmm_formula: EodFormula::simulation_flmm(),
            score_covariates: vec!["z".into()],
            fpca: FpcaOptions::default(),
            mlmm: LmmOptions::default(),
            lme: LmmOptions::default(),
            flmm: FlmmOptions::default(),
            train_ratio: 0.8,
            norm_order: 1.0,
            threshold: None,
            gpm: GpmSpec {
                covariates: vec!["z".into()],
                ..GpmSpec::default()
            },
        }
    }

    /// Covariate layout of the battery data (temperature, current, cutoff voltage).
    pub fn battery(eod_model: EodKind) -> Self {
        let z: Vec<String> = ["z1", "z2", "z3"].iter().map(|s| s.to_string()).collect();
        Self {
            lme_formula: EodFormula::battery_lme(),
            flmm_formula: EodFormula::battery_flmm(),
            score_covariates: z.clone(),
            gpm: GpmSpec {
                covariates: z,
                ..GpmSpec::default()
            },
            train_ratio: 0.75,
            ..Self::simulation(eod_model)
        }
    }

    pub fn formula(&self) -> &EodFormula {
        match self.eod_model {
            EodKind::Lme => &self.lme_formula,
            EodKind::Flmm => &self.flmm_formula,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.train_ratio > 0.0 && self.train_ratio <= 1.0) {
            return Err(Error::invalid(format!(
                "train ratio must be in (0, 1], got {}",
                self.train_ratio
            )));
        }
        if !(self.norm_order >= 1.0) || !self.norm_order.is_finite() {
            return Err(Error::invalid(format!("norm order must be >= 1, got {}", self.norm_order)));
        }
        self.formula().validate()
    }
}

/// Fitted EOD model of either kind.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EodFit {
    Lme(LmeEodFit),
    Flmm(FlmmEodFit),
}

impl EodFit {
    pub fn kind(&self) -> EodKind {
        match self {
            EodFit::Lme(_) => EodKind::Lme,
            EodFit::Flmm(_) => EodKind::Flmm,
        }
    }

    pub fn coef_names(&self) -> &[String] {
        match self {
            EodFit::Lme(f) => &f.coef_names,
            EodFit::Flmm(f) => &f.coef_names,
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        match self {
            EodFit::Lme(f) => &f.alpha,
            EodFit::Flmm(f) => &f.alpha,
        }
    }

    pub fn std_errors(&self) -> &[f64] {
        match self {
            EodFit::Lme(f) => &f.std_errors,
            EodFit::Flmm(f) => &f.std_errors,
        }
    }

    fn has_unit(&self, unit_id: &str) -> bool {
        match self {
            EodFit::Lme(f) => f.unit_effects(unit_id).is_some(),
            EodFit::Flmm(f) => f.unit_effects(unit_id).is_some(),
        }
    }
}

/// All fitted components of the functional degradation model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FdmModel {
    pub schema_version: u32,
    pub config: PipelineConfig,
    pub fpca: FpcaModel,
    pub mlmm: MlmmFit,
    pub eod: EodFit,
}

impl FdmModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        if m.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "model schema version {} is not supported (expected {MODEL_SCHEMA_VERSION})",
                m.schema_version
            )));
        }
        Ok(m)
    }

    fn knows(&self, unit_id: &str) -> bool {
        self.mlmm.unit_effects(unit_id).is_some() && self.eod.has_unit(unit_id)
    }

    /// Predicted scaled curve of a cycle.
    pub fn curve(&self, unit_id: &str, cycle: u32, z: &crate::data::CovariateVector) -> Result<Vec<f64>> {
        let scores = self.mlmm.predict(unit_id, cycle as f64, z, !self.knows(unit_id))?;
        self.fpca.reconstruct_values(&scores)
    }
}

/// One unit's cycles with the train/test split and observed norms.
#[derive(Debug, Clone)]
pub struct PreparedUnit<'a> {
    pub unit_id: String,
    pub records: Vec<&'a CycleRecord>,
    /// First test cycle ñ; training cycles are those below it.
    pub first_test: u32,
    pub observed_norms: Vec<f64>,
    pub observed_d: Vec<f64>,
}

impl<'a> PreparedUnit<'a> {
    pub fn first_norm(&self) -> f64 {
        self.observed_norms[0]
    }

    pub fn train(&self) -> Vec<&'a CycleRecord> {
        self.records.iter().copied().filter(|r| r.cycle < self.first_test).collect()
    }

    pub fn test(&self) -> Vec<&'a CycleRecord> {
        self.records.iter().copied().filter(|r| r.cycle >= self.first_test).collect()
    }
}

/// Dataset split into training and test cycles, with observed degradation.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub units: Vec<PreparedUnit<'a>>,
}

impl<'a> Prepared<'a> {
    pub fn new(dataset: &'a Dataset, train_ratio: f64, norm_order: f64) -> Result<Self> {
        dataset.validate()?;
        if !(train_ratio > 0.0 && train_ratio <= 1.0) {
            return Err(Error::invalid(format!("train ratio must be in (0, 1], got {train_ratio}")));
        }
        let mut units = Vec::with_capacity(dataset.units.len());
        for u in &dataset.units {
            let mut records: Vec<&CycleRecord> = u.cycles.iter().collect();
            records.sort_by_key(|r| r.cycle);
            let observed_norms = records
                .iter()
                .map(|r| degradation::lp_norm_scaled(&r.scaled.values, r.eod, norm_order))
                .collect::<Result<Vec<f64>>>()?;
            let first = observed_norms[0];
            let mut observed_d = Vec::with_capacity(records.len());
            for (k, n) in observed_norms.iter().enumerate() {
                observed_d.push(if k == 0 { 0.0 } else { degradation::degradation_amount(first, *n)? });
            }
            let first_test = degradation::split_point(records.len(), train_ratio) as u32;
            units.push(PreparedUnit {
                unit_id: u.unit_id.clone(),
                records,
                first_test,
                observed_norms,
                observed_d,
            });
        }
        Ok(Self { units })
    }

    pub fn train_records(&self) -> Vec<&'a CycleRecord> {
        self.units.iter().flat_map(|u| u.train()).collect()
    }
}

/// Model inputs built once from the training cycles; reused by weighted refits.
pub struct TrainingSet<'a> {
    pub prepared: Prepared<'a>,
    pub fpca: FpcaModel,
    pub mlmm_data: MlmmData,
    pub eod_data: EodData,
}

pub enum EodData {
    Lme(LmeEodData),
    Flmm(FlmmEodData),
}

impl<'a> TrainingSet<'a> {
    pub fn new(dataset: &'a Dataset, config: &PipelineConfig) -> Result<Self> {
        config.validate()?;
        let prepared = Prepared::new(dataset, config.train_ratio, config.norm_order).map_err(|e| e.at_stage("data"))?;
        let train = prepared.train_records();
        if train.is_empty() {
            return Err(Error::InsufficientData("no training cycles".into()).at_stage("data"));
        }
        let curves: Vec<_> = train.iter().map(|r| &r.scaled).collect();
        let fpca = fpca::fit_fpca(&curves, &config.fpca).map_err(|e| e.at_stage("fpca"))?;
        let scores = curves
            .iter()
            .map(|c| fpca::project_scores(&fpca, c))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.at_stage("fpca"))?;
        let mlmm_data = MlmmData::new(&scores, &train, &config.score_covariates).map_err(|e| e.at_stage("mlmm"))?;
        let eod_data = match config.eod_model {
            EodKind::Lme => EodData::Lme(LmeEodData::new(&train, &config.lme_formula).map_err(|e| e.at_stage("eod"))?),
            EodKind::Flmm => EodData::Flmm(
                FlmmEodData::new(&train, &config.flmm_formula, &config.flmm).map_err(|e| e.at_stage("eod"))?,
            ),
        };
        Ok(Self {
            prepared,
            fpca,
            mlmm_data,
            eod_data,
        })
    }

    /// Unit ids in the order the weighted fits expect.
    pub fn unit_ids(&self) -> Vec<String> {
        self.mlmm_data.unit_ids()
    }

    /// Fit score and EOD models with unit weights (aligned with [`TrainingSet::unit_ids`]).
    pub fn fit_weighted(
        &self,
        config: &PipelineConfig,
        weights: &[f64],
        start: Option<&FdmModel>,
    ) -> Result<FdmModel> {
        let mlmm = self
            .mlmm_data
            .fit_weighted(weights, &config.mlmm, start.map(|s| &s.mlmm))
            .map_err(|e| e.at_stage("mlmm"))?;
        let eod = match &self.eod_data {
            EodData::Lme(d) => {
                let st = start.and_then(|s| match &s.eod {
                    EodFit::Lme(f) => Some(f),
                    EodFit::Flmm(_) => None,
                });
                EodFit::Lme(d.fit_weighted(weights, &config.lme, st).map_err(|e| e.at_stage("eod"))?)
            }
            EodData::Flmm(d) => {
                let st = start.and_then(|s| match &s.eod {
                    EodFit::Flmm(f) => Some(f),
                    EodFit::Lme(_) => None,
                });
                EodFit::Flmm(d.fit_weighted(weights, &config.flmm, st).map_err(|e| e.at_stage("eod"))?)
            }
        };
        Ok(FdmModel {
            schema_version: MODEL_SCHEMA_VERSION,
            config: config.clone(),
            fpca: self.fpca.clone(),
            mlmm,
            eod,
        })
    }

    pub fn fit(&self, config: &PipelineConfig) -> Result<FdmModel> {
        let w = vec![1.0; self.mlmm_data.n_units()];
        self.fit_weighted(config, &w, None)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePrediction {
    pub cycle: u32,
    pub source: Source,
    pub eod_obs: f64,
    pub eod_hat: f64,
    pub norm_obs: f64,
    pub norm_hat: f64,
    pub d_obs: f64,
    pub d_hat: f64,
    /// ∫ (x̂ − x)² of the scaled curve.
    pub curve_ise: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitPrediction {
    pub unit_id: String,
    pub first_test: u32,
    pub first_norm: f64,
    pub cycles: Vec<CyclePrediction>,
}

impl UnitPrediction {
    /// Fitted and predicted degradation path.
    pub fn path(&self, threshold: Option<f64>) -> Result<DegradationPath> {
        let mut p = DegradationPath::new(&self.unit_id);
        for c in &self.cycles {
            p.push(c.cycle, c.d_hat, c.eod_hat, c.source)?;
        }
        p.set_threshold(threshold);
        Ok(p)
    }

    /// Observed degradation path (d = 0 at the first cycle).
    pub fn observed_path(&self, threshold: Option<f64>) -> Result<DegradationPath> {
        let mut p = DegradationPath::new(&self.unit_id);
        for c in &self.cycles {
            p.push(c.cycle, c.d_obs, c.eod_obs, Source::Observed)?;
        }
        p.set_threshold(threshold);
        Ok(p)
    }
}

fn degradation_of(first_norm: f64, curve: &[f64], eod: f64, p: f64) -> Result<(f64, f64)> {
    let norm = degradation::lp_norm_scaled(curve, eod, p)?;
    Ok((norm, degradation::degradation_amount(first_norm, norm)?))
}

/// Fitted (training) and predicted (test) quantities for every cycle of one unit.
pub fn predict_unit(model: &FdmModel, unit: &PreparedUnit<'_>) -> Result<UnitPrediction> {
    let id = unit.unit_id.as_str();
    let population = !model.knows(id);
    let p = model.config.norm_order;
    let train = unit.train();
    let test = unit.test();
    let first = unit.first_norm();
    let mut cycles = Vec::with_capacity(unit.records.len());
    let scored = |r: &CycleRecord| -> Result<Vec<f64>> {
        let s = model.mlmm.predict(id, r.cycle as f64, &r.covariates, population)?;
        model.fpca.reconstruct_values(&s)
    };
    let push = |cycles: &mut Vec<CyclePrediction>, r: &CycleRecord, k: usize, source, x_hat: &[f64], b_hat: f64| -> Result<()> {
        let (norm_hat, d_hat) = degradation_of(first, x_hat, b_hat, p)
            .map_err(|e| Error::invalid(format!("unit {id} cycle {}: {e}", r.cycle)))?;
        cycles.push(CyclePrediction {
            cycle: r.cycle,
            source,
            eod_obs: r.eod,
            eod_hat: b_hat,
            norm_obs: unit.observed_norms[k],
            norm_hat,
            d_obs: unit.observed_d[k],
            d_hat,
            curve_ise: degradation::curve_squared_error(x_hat, &r.scaled.values)?,
        });
        Ok(())
    };
    for (k, r) in train.iter().enumerate() {
        let x_hat = scored(r)?;
        let rest = r.rest_covariate();
        let b_hat = match &model.eod {
            EodFit::Lme(f) => f.predict_one(id, r.cycle, r.prev_eod, rest, &r.covariates, population)?,
            EodFit::Flmm(f) => f.predict_one(id, r.cycle, r.prev_eod, rest, &r.covariates, &r.scaled.values, population)?,
        };
        push(&mut cycles, r, k, Source::Fitted, &x_hat, b_hat)?;
    }
    if !test.is_empty() {
        let curves = test.iter().map(|r| scored(r)).collect::<Result<Vec<_>>>()?;
        let horizon: Vec<FutureCycle> = test.iter().map(|r| FutureCycle::from(*r)).collect();
        let eods = match &model.eod {
            EodFit::Lme(f) => eod::predict_eod_path(f, id, &train, &horizon, population)?,
            EodFit::Flmm(f) => flmm::predict_flmm_path(f, id, &train, &horizon, &curves, population)?,
        };
        for (j, r) in test.iter().enumerate() {
            push(&mut cycles, r, train.len() + j, Source::Predicted, &curves[j], eods[j])?;
        }
    }
    Ok(UnitPrediction {
        unit_id: unit.unit_id.clone(),
        first_test: unit.first_test,
        first_norm: first,
        cycles,
    })
}

pub fn predict_all(model: &FdmModel, prepared: &Prepared<'_>) -> Result<Vec<UnitPrediction>> {
    prepared
        .units
        .par_iter()
        .map(|u| predict_unit(model, u))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.at_stage("prediction"))
}

/// Fits plus per-unit predictions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub model: FdmModel,
    pub units: Vec<UnitPrediction>,
}

impl PipelineOutput {
    pub fn paths(&self) -> Result<Vec<DegradationPath>> {
        self.units.iter().map(|u| u.path(self.model.config.threshold)).collect()
    }
}

/// Run the whole model on a dataset.
pub fn run_fdm_pipeline(dataset: &Dataset, config: &PipelineConfig) -> Result<PipelineOutput> {
    let ts = TrainingSet::new(dataset, config)?;
    let model = ts.fit(config)?;
    let units = predict_all(&model, &ts.prepared)?;
    Ok(PipelineOutput { model, units })
}

/// Training (RMSE) and test (RMSPE) errors of degradation, EOD and scaled curves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub degradation: ErrorPair,
    pub eod: ErrorPair,
    pub curve: ErrorPair,
}

fn pair(units: &[UnitPrediction], f: impl Fn(&CyclePrediction) -> f64) -> Result<ErrorPair> {
    let all = || units.iter().flat_map(|u| u.cycles.iter());
    let rmse = degradation::pooled_rms(all().filter(|c| c.source == Source::Fitted).map(&f))
        .unwrap_or(f64::NAN);
    let rmspe = degradation::pooled_rms(all().filter(|c| c.source == Source::Predicted).map(&f))?;
    Ok(ErrorPair { rmse, rmspe })
}

/// Pooled errors over units; fails when there are no test cycles.
pub fn evaluate(units: &[UnitPrediction]) -> Result<Evaluation> {
    Ok(Evaluation {
        degradation: pair(units, |c| (c.d_hat - c.d_obs).powi(2))?,
        eod: pair(units, |c| (c.eod_hat - c.eod_obs).powi(2))?,
        curve: pair(units, |c| c.curve_ise)?,
    })
}

/// Degradation prediction of the path-model baseline for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpmCycle {
    pub cycle: u32,
    pub source: Source,
    pub d_obs: f64,
    pub d_hat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpmOutput {
    pub fit: GpmFit,
    pub units: Vec<(String, Vec<GpmCycle>)>,
}

impl GpmOutput {
    pub fn degradation_errors(&self) -> Result<ErrorPair> {
        let all = || self.units.iter().flat_map(|u| u.1.iter());
        let sq = |c: &GpmCycle| (c.d_hat - c.d_obs).powi(2);
        Ok(ErrorPair {
            rmse: degradation::pooled_rms(all().filter(|c| c.source == Source::Fitted).map(sq)).unwrap_or(f64::NAN),
            rmspe: degradation::pooled_rms(all().filter(|c| c.source == Source::Predicted).map(sq))?,
        })
    }
}

/// Fit the baseline to observed training degradation amounts and predict the test cycles.
pub fn run_gpm_pipeline(dataset: &Dataset, config: &PipelineConfig) -> Result<GpmOutput> {
    let prepared = Prepared::new(dataset, config.train_ratio, config.norm_order).map_err(|e| e.at_stage("data"))?;
    let mut obs = Vec::new();
    for u in &prepared.units {
        for (k, r) in u.records.iter().enumerate() {
            if r.cycle >= u.first_test {
                break;
            }
            obs.push(GpmObservation {
                unit_id: u.unit_id.clone(),
                cycle: r.cycle,
                d: u.observed_d[k],
                prev_d: if k == 0 { 0.0 } else { u.observed_d[k - 1] },
                rest_hours: r.rest_hours,
                covariates: r.covariates.clone(),
            });
        }
    }
    let fit = gpm::fit_gpm(&obs, &config.gpm, &config.lme).map_err(|e| e.at_stage("gpm"))?;
    let mut units = Vec::with_capacity(prepared.units.len());
    for u in &prepared.units {
        let id = u.unit_id.as_str();
        let population = fit.unit_effect(id).is_none();
        let mut rows = Vec::with_capacity(u.records.len());
        let n_train = u.records.iter().filter(|r| r.cycle < u.first_test).count();
        for (k, r) in u.records.iter().take(n_train).enumerate() {
            let prev = if k == 0 { 0.0 } else { u.observed_d[k - 1] };
            let d_hat = fit.predict_one(id, r.cycle, prev, rest_covariate(r.rest_hours)?, &r.covariates, population)?;
            rows.push(GpmCycle {
                cycle: r.cycle,
                source: Source::Fitted,
                d_obs: u.observed_d[k],
                d_hat,
            });
        }
        let horizon: Vec<GpmFuture> = u.records[n_train..]
            .iter()
            .map(|r| GpmFuture {
                cycle: r.cycle,
                rest_hours: r.rest_hours,
                covariates: r.covariates.clone(),
            })
            .collect();
        let last = (n_train > 0).then(|| (u.records[n_train - 1].cycle, u.observed_d[n_train - 1]));
        let preds = gpm::predict_gpm(&fit, id, last, &horizon, population).map_err(|e| e.at_stage("gpm"))?;
        for (j, d_hat) in preds.into_iter().enumerate() {
            rows.push(GpmCycle {
                cycle: u.records[n_train + j].cycle,
                source: Source::Predicted,
                d_obs: u.observed_d[n_train + j],
                d_hat,
            });
        }
        units.push((u.unit_id.clone(), rows));
    }
    Ok(GpmOutput { fit, units })
}

/// Forecast row for a cycle beyond the observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastCycle {
    pub cycle: u32,
    pub scores: Vec<f64>,
    pub eod: f64,
    pub norm: f64,
    pub d: f64,
    pub curve: Vec<f64>,
}

/// Predict `horizon` cycles after the unit's last observed cycle, each with
/// the given rest period. The EOD lag starts at the last observed EOD.
pub fn forecast(model: &FdmModel, dataset: &Dataset, unit_id: &str, horizon: usize, rest_hours: f64) -> Result<Vec<ForecastCycle>> {
    let unit = dataset
        .unit(unit_id)
        .ok_or_else(|| Error::invalid(format!("unit {unit_id} not in dataset")))?;
    let mut history: Vec<&CycleRecord> = unit.cycles.iter().collect();
    history.sort_by_key(|r| r.cycle);
    let first = history
        .first()
        .ok_or_else(|| Error::InsufficientData(format!("unit {unit_id} has no cycles")))?;
    let p = model.config.norm_order;
    let first_norm = degradation::lp_norm_scaled(&first.scaled.values, first.eod, p)?;
    let z = unit.covariates().clone();
    let last = history.last().map_or(0, |r| r.cycle);
    let fut: Vec<FutureCycle> = (1..=horizon as u32)
        .map(|k| FutureCycle {
            cycle: last + k,
            rest_hours,
            covariates: z.clone(),
        })
        .collect();
    let population = !model.knows(unit_id);
    let scores = fut
        .iter()
        .map(|f| model.mlmm.predict(unit_id, f.cycle as f64, &z, population))
        .collect::<Result<Vec<_>>>()?;
    let curves = scores
        .iter()
        .map(|s| model.fpca.reconstruct_values(s))
        .collect::<Result<Vec<_>>>()?;
    let eods = match &model.eod {
        EodFit::Lme(f) => eod::predict_eod_path(f, unit_id, &history, &fut, population)?,
        EodFit::Flmm(f) => flmm::predict_flmm_path(f, unit_id, &history, &fut, &curves, population)?,
    };
    let mut out = Vec::with_capacity(horizon);
    for (((f, s), x), b) in fut.iter().zip(scores).zip(curves).zip(eods) {
        let (norm, d) = degradation_of(first_norm, &x, b, p)?;
        out.push(ForecastCycle {
            cycle: f.cycle,
            scores: s,
            eod: b,
            norm,
            d,
            curve: x,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_dataset, SimulationConfig};

    fn dataset(n_units: usize, n_cycles: usize) -> Dataset {
        let cfg = SimulationConfig {
            n_units,
            n_cycles,
            grid_size: 60,
            ..Default::default()
        };
        generate_dataset(&cfg, 0, 0).unwrap().dataset
    }

    #[test]
    fn split_and_first_cycle_convention() {
        let ds = dataset(3, 50);
        let prep = Prepared::new(&ds, 0.8, 1.0).unwrap();
        for u in &prep.units {
            assert_eq!(u.first_test, 41);
            assert_eq!(u.train().len(), 40);
            assert_eq!(u.test().len(), 10);
            assert_eq!(u.observed_d[0], 0.0);
        }
        let all = Prepared::new(&ds, 1.0, 1.0).unwrap();
        assert!(all.units.iter().all(|u| u.test().is_empty()));
        assert!(Prepared::new(&ds, 0.0, 1.0).is_err());
    }

    #[test]
    fn predicted_degradation_uses_observed_first_norm() {
        let ds = dataset(6, 20);
        let out = run_fdm_pipeline(&ds, &PipelineConfig::default()).unwrap();
        let prep = Prepared::new(&ds, 0.8, 1.0).unwrap();
        for (u, pu) in out.units.iter().zip(&prep.units) {
            assert_eq!(u.first_norm, pu.first_norm());
            let c0 = &u.cycles[0];
            assert_eq!(c0.d_obs, 0.0);
            let want = (u.first_norm - c0.norm_hat) / u.first_norm;
            assert!((c0.d_hat - want).abs() < 1e-12);
            assert_eq!(u.cycles.iter().filter(|c| c.source == Source::Predicted).count(), 4);
        }
        let e = evaluate(&out.units).unwrap();
        assert!(e.degradation.rmspe.is_finite() && e.eod.rmspe > 0.0);
    }

    #[test]
    fn training_on_everything_has_nothing_to_evaluate() {
        let ds = dataset(5, 12);
        let cfg = PipelineConfig {
            train_ratio: 1.0,
            ..PipelineConfig::default()
        };
        let out = run_fdm_pipeline(&ds, &cfg).unwrap();
        assert!(out.units.iter().all(|u| u.cycles.iter().all(|c| c.source == Source::Fitted)));
        assert!(evaluate(&out.units).is_err());
    }

    #[test]
    fn unseen_unit_gets_population_prediction() {
        let ds = dataset(6, 15);
        let mut train = ds.clone();
        let held = train.units.remove(2);
        let model = run_fdm_pipeline(&train, &PipelineConfig::default()).unwrap().model;
        assert!(!model.knows(&held.unit_id));
        let mut single = ds.clone();
        single.units.retain(|u| u.unit_id == held.unit_id);
        let prep = Prepared::new(&single, 0.8, 1.0).unwrap();
        let pred = predict_unit(&model, &prep.units[0]).unwrap();
        let r = &held.cycles[1];
        let EodFit::Lme(f) = &model.eod else { panic!("expected an LME fit") };
        let want = f.predict_one(&held.unit_id, r.cycle, r.prev_eod, r.rest_covariate(), &r.covariates, true).unwrap();
        assert_eq!(pred.cycles[1].eod_hat, want);
    }

    #[test]
    fn model_json_round_trip_and_version_check() {
        let ds = dataset(5, 12);
        let model = run_fdm_pipeline(&ds, &PipelineConfig::default()).unwrap().model;
        let text = model.to_json().unwrap();
        let back = FdmModel::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["schema_version"] = serde_json::json!(MODEL_SCHEMA_VERSION + 1);
        assert!(FdmModel::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn pipeline_is_deterministic() {
        let ds = dataset(5, 12);
        let a = run_fdm_pipeline(&ds, &PipelineConfig::default()).unwrap();
        let b = run_fdm_pipeline(&ds, &PipelineConfig::default()).unwrap();
        assert_eq!(a.units, b.units);
    }
}
