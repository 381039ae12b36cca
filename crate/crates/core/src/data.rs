//! Domain types for discharge-curve datasets, ingestion from delimited text,
//! rescaling onto the unit domain and covariate transforms.

use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, DEFAULT_GRID_SIZE};

/// Version of the canonical dataset JSON schema.
pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Boltzmann-derived constant of the Arrhenius transform (1 / k_B in K/eV).
const ARRHENIUS_CONSTANT: f64 = 11604.52;
const KELVIN_OFFSET: f64 = 273.15;
/// Baseline levels at which the battery covariates vanish.
pub const BASELINE_TEMP_C: f64 = 24.0;
pub const BASELINE_CURRENT_A: f64 = 2.0;
pub const BASELINE_STOP_VOLTAGE_V: f64 = 2.0;

/// A discharge curve as sampled: times in seconds from the start of the cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawCurve {
    pub unit_id: String,
    pub cycle: u32,
    /// (time in s, voltage in V); first time 0, last time equal to `eod`.
    pub samples: Vec<(f64, f64)>,
    pub eod: f64,
}

impl RawCurve {
    /// Build a raw curve, shifting times so that the first sample is at 0.
    pub fn new(unit_id: impl Into<String>, cycle: u32, samples: Vec<(f64, f64)>) -> Result<Self> {
        let unit_id = unit_id.into();
        if samples.len() < 2 {
            return Err(Error::invalid(format!(
                "unit {unit_id} cycle {cycle}: need at least 2 samples, got {}",
                samples.len()
            )));
        }
        let t0 = samples[0].0;
        let samples: Vec<(f64, f64)> = samples.into_iter().map(|(t, v)| (t - t0, v)).collect();
        if samples.iter().any(|(t, v)| !t.is_finite() || !v.is_finite()) {
            return Err(Error::invalid(format!(
                "unit {unit_id} cycle {cycle}: non-finite sample"
            )));
        }
        if samples.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::invalid(format!(
                "unit {unit_id} cycle {cycle}: sample times not strictly increasing"
            )));
        }
        let eod = samples[samples.len() - 1].0;
        Ok(Self {
            unit_id,
            cycle,
            samples,
            eod,
        })
    }

    /// Map onto the unit domain via t = r / eod and interpolate onto a uniform grid.
    pub fn rescale(&self, grid_size: usize) -> ScaledCurve {
        let ts: Vec<f64> = self.samples.iter().map(|(r, _)| r / self.eod).collect();
        let ys: Vec<f64> = self.samples.iter().map(|(_, y)| *y).collect();
        let values = grid::uniform_grid(grid_size)
            .into_iter()
            .map(|t| grid::interp_linear(&ts, &ys, t))
            .collect();
        ScaledCurve {
            unit_id: self.unit_id.clone(),
            cycle: self.cycle,
            values,
        }
    }
}

/// A discharge curve on the common unit domain, sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledCurve {
    pub unit_id: String,
    pub cycle: u32,
    pub values: Vec<f64>,
}

impl ScaledCurve {
    pub fn grid_size(&self) -> usize {
        self.values.len()
    }

    /// Voltage y(r) = x(r / eod) on the natural domain [0, eod].
    pub fn unscale_at(&self, eod: f64, r: f64) -> f64 {
        grid::eval_on_unit_grid(&self.values, r / eod)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.values.len() < 2 {
            return Err(Error::invalid("scaled curve needs at least 2 grid points"));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "unit {} cycle {}: non-finite curve value",
                self.unit_id, self.cycle
            )));
        }
        Ok(())
    }
}

/// One named covariate value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Covariate {
    pub name: String,
    pub value: f64,
}

/// Ordered set of named unit-level covariates.
///
/// Battery data use `z1` (Arrhenius temperature), `z2` (discharge current) and
/// `z3` (stopping voltage); simulated data use a single `z`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CovariateVector {
    entries: Vec<Covariate>,
}

impl CovariateVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Transformed experimental conditions of a battery test.
    pub fn battery(temp_c: f64, current_a: f64, stop_voltage_v: f64) -> Result<Self> {
        Ok(Self::new()
            .with("z1", arrhenius_z1(temp_c)?)
            .with("z2", powerlaw_z(current_a, BASELINE_CURRENT_A)?)
            .with("z3", powerlaw_z(stop_voltage_v, BASELINE_STOP_VOLTAGE_V)?))
    }

    /// Append (or overwrite) a named covariate.
    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.set(name, value);
        self
    }

    pub fn set(&mut self, name: &str, value: f64) {
        match self.entries.iter_mut().find(|c| c.name == name) {
            Some(c) => c.value = value,
            None => self.entries.push(Covariate {
                name: name.to_string(),
                value,
            }),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|c| c.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn z1(&self) -> Option<f64> {
        self.get("z1")
    }

    pub fn z2(&self) -> Option<f64> {
        self.get("z2")
    }

    pub fn z3(&self) -> Option<f64> {
        self.get("z3")
    }
}

/// Everything the models need about one cycle of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub unit_id: String,
    /// Re-indexed cycle number, contiguous from 1.
    pub cycle: u32,
    /// End of discharge in seconds.
    pub eod: f64,
    /// Rest period before this cycle, in hours (0 for cycle 1).
    pub rest_hours: f64,
    /// EOD of the previous cycle (0 for cycle 1).
    pub prev_eod: f64,
    pub covariates: CovariateVector,
    pub scaled: ScaledCurve,
}

impl CycleRecord {
    /// exp(-1 / rest) covariate of this cycle.
    pub fn rest_covariate(&self) -> f64 {
        rest_covariate(self.rest_hours).unwrap_or(0.0)
    }
}

/// The cycles of one unit in re-indexed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSeries {
    pub unit_id: String,
    pub cycles: Vec<CycleRecord>,
}

impl UnitSeries {
    pub fn n_cycles(&self) -> usize {
        self.cycles.len()
    }

    pub fn covariates(&self) -> &CovariateVector {
        &self.cycles[0].covariates
    }
}

/// A cycle dropped during ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedCycle {
    pub unit_id: String,
    /// Cycle number as recorded in the source file.
    pub source_cycle: u32,
    pub reason: String,
}

/// Canonical dataset: all units with their cycle records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema_version: u32,
    pub grid_size: usize,
    pub units: Vec<UnitSeries>,
    #[serde(default)]
    pub rejected: Vec<RejectedCycle>,
}

impl Dataset {
    pub fn new(grid_size: usize, units: Vec<UnitSeries>) -> Self {
        Self {
            schema_version: DATASET_SCHEMA_VERSION,
            grid_size,
            units,
            rejected: Vec::new(),
        }
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    /// Every cycle record, unit by unit.
    pub fn records(&self) -> impl Iterator<Item = &CycleRecord> {
        self.units.iter().flat_map(|u| u.cycles.iter())
    }

    pub fn unit(&self, unit_id: &str) -> Option<&UnitSeries> {
        self.units.iter().find(|u| u.unit_id == unit_id)
    }

    /// Check structural invariants: contiguous cycles, common grid, valid EODs.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported dataset schema version {}",
                self.schema_version
            )));
        }
        for unit in &self.units {
            if unit.cycles.is_empty() {
                return Err(Error::invalid(format!("unit {} has no cycles", unit.unit_id)));
            }
            for (k, rec) in unit.cycles.iter().enumerate() {
                if rec.cycle as usize != k + 1 {
                    return Err(Error::invalid(format!(
                        "unit {}: cycles not contiguous from 1 (position {} has cycle {})",
                        unit.unit_id,
                        k + 1,
                        rec.cycle
                    )));
                }
                if !(rec.eod > 0.0) || !rec.eod.is_finite() {
                    return Err(Error::invalid(format!(
                        "unit {} cycle {}: eod must be positive",
                        unit.unit_id, rec.cycle
                    )));
                }
                if rec.rest_hours < 0.0 {
                    return Err(Error::invalid(format!(
                        "unit {} cycle {}: negative rest period",
                        unit.unit_id, rec.cycle
                    )));
                }
                grid::check_grid(self.grid_size, rec.scaled.grid_size())?;
                rec.scaled.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Arrhenius transform of a temperature in °C, zero at 24 °C.
pub fn arrhenius_z1(temp_c: f64) -> Result<f64> {
    if !(temp_c > -KELVIN_OFFSET) || !temp_c.is_finite() {
        return Err(Error::invalid(format!("non-physical temperature {temp_c} °C")));
    }
    Ok(ARRHENIUS_CONSTANT / (temp_c + KELVIN_OFFSET)
        - ARRHENIUS_CONSTANT / (BASELINE_TEMP_C + KELVIN_OFFSET))
}

/// Power-law transform log(value / baseline), zero at the baseline.
pub fn powerlaw_z(value: f64, baseline: f64) -> Result<f64> {
    if !(value > 0.0) || !(baseline > 0.0) {
        return Err(Error::invalid(format!(
            "power-law transform needs positive inputs (value {value}, baseline {baseline})"
        )));
    }
    Ok((value / baseline).ln())
}

/// exp(-1 / rest) for a rest period in hours; 0 at rest = 0.
pub fn rest_covariate(rest_hours: f64) -> Result<f64> {
    if rest_hours < 0.0 || rest_hours.is_nan() {
        return Err(Error::invalid(format!("negative rest period {rest_hours}")));
    }
    if rest_hours == 0.0 {
        return Ok(0.0);
    }
    Ok((-1.0 / rest_hours).exp())
}

/// Parse an ISO-8601 timestamp or epoch seconds into epoch seconds.
pub fn parse_timestamp(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<f64>() {
        return Ok(v);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.timestamp() as f64 + dt.timestamp_subsec_nanos() as f64 * 1e-9);
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            let utc = dt.and_utc();
            return Ok(utc.timestamp() as f64 + utc.timestamp_subsec_nanos() as f64 * 1e-9);
        }
    }
    Err(Error::invalid(format!("unrecognized timestamp `{s}`")))
}

#[derive(Debug, Clone)]
struct MetaRow {
    temp_c: f64,
    current_a: f64,
    stop_voltage_v: f64,
    start: f64,
}

fn field<'a>(rec: &'a csv::StringRecord, idx: usize, what: &str, line: usize) -> Result<&'a str> {
    rec.get(idx)
        .map(str::trim)
        .ok_or_else(|| Error::invalid(format!("line {line}: missing column `{what}`")))
}

fn num(rec: &csv::StringRecord, idx: usize, what: &str, line: usize) -> Result<f64> {
    let s = field(rec, idx, what, line)?;
    s.parse::<f64>()
        .map_err(|_| Error::invalid(format!("line {line}: `{what}` is not a number: `{s}`")))
}

fn cycle_num(rec: &csv::StringRecord, idx: usize, line: usize) -> Result<u32> {
    let s = field(rec, idx, "cycle", line)?;
    s.parse::<u32>()
        .map_err(|_| Error::invalid(format!("line {line}: cycle is not a positive integer: `{s}`")))
}

/// Read the curve and metadata tables and assemble the canonical dataset.
///
/// Curve rows are `unit_id, cycle, time_s, voltage`; metadata rows are
/// `unit_id, temp_C, dc_A, sv_V, cycle, start_timestamp`. Both files carry a
/// header row. Cycles with fewer than two samples or non-increasing times are
/// rejected and recorded in [`Dataset::rejected`].
pub fn ingest_dataset<C: Read, M: Read>(curves: C, meta: M, grid_size: usize) -> Result<Dataset> {
    if grid_size < 2 {
        return Err(Error::invalid("grid size must be at least 2"));
    }

    let mut meta_rows: HashMap<String, BTreeMap<u32, MetaRow>> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(meta);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let unit = field(&rec, 0, "unit_id", line)?.to_string();
        let row = MetaRow {
            temp_c: num(&rec, 1, "temp_C", line)?,
            current_a: num(&rec, 2, "dc_A", line)?,
            stop_voltage_v: num(&rec, 3, "sv_V", line)?,
            start: parse_timestamp(field(&rec, 5, "start_timestamp", line)?)?,
        };
        let cycle = cycle_num(&rec, 4, line)?;
        meta_rows.entry(unit).or_default().insert(cycle, row);
    }

    // unit -> source cycle -> samples, units kept in first-appearance order
    let mut order: Vec<String> = Vec::new();
    let mut samples: HashMap<String, BTreeMap<u32, Vec<(f64, f64)>>> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(curves);
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let unit = field(&rec, 0, "unit_id", line)?.to_string();
        let cycle = cycle_num(&rec, 1, line)?;
        let t = num(&rec, 2, "time_s", line)?;
        let v = num(&rec, 3, "voltage", line)?;
        if !samples.contains_key(&unit) {
            order.push(unit.clone());
        }
        samples
            .entry(unit)
            .or_default()
            .entry(cycle)
            .or_default()
            .push((t, v));
    }

    let mut units = Vec::with_capacity(order.len());
    let mut rejected = Vec::new();
    for unit_id in order {
        let unit_meta = meta_rows.get(&unit_id).ok_or_else(|| Error::MissingMetadata {
            unit: unit_id.clone(),
            cycle: None,
        })?;
        let mut accepted: Vec<(RawCurve, &MetaRow)> = Vec::new();
        for (&source_cycle, pts) in &samples[&unit_id] {
            let m = unit_meta.get(&source_cycle).ok_or_else(|| Error::MissingMetadata {
                unit: unit_id.clone(),
                cycle: Some(source_cycle),
            })?;
            match RawCurve::new(unit_id.clone(), source_cycle, pts.clone()) {
                Ok(raw) => accepted.push((raw, m)),
                Err(e) => {
                    log::warn!("rejecting unit {unit_id} cycle {source_cycle}: {e}");
                    rejected.push(RejectedCycle {
                        unit_id: unit_id.clone(),
                        source_cycle,
                        reason: e.to_string(),
                    });
                }
            }
        }
        if accepted.is_empty() {
            continue;
        }
        let first = accepted[0].1;
        let covariates =
            CovariateVector::battery(first.temp_c, first.current_a, first.stop_voltage_v)?;
        let mut cycles = Vec::with_capacity(accepted.len());
        let mut prev: Option<(f64, f64)> = None; // (start, eod)
        for (k, (raw, m)) in accepted.into_iter().enumerate() {
            let cycle = (k + 1) as u32;
            let (rest_hours, prev_eod) = match prev {
                None => (0.0, 0.0),
                Some((start, eod)) => (((m.start - start) / 3600.0).max(0.0), eod),
            };
            let mut scaled = raw.rescale(grid_size);
            scaled.cycle = cycle;
            cycles.push(CycleRecord {
                unit_id: unit_id.clone(),
                cycle,
                eod: raw.eod,
                rest_hours,
                prev_eod,
                covariates: covariates.clone(),
                scaled,
            });
            prev = Some((m.start, raw.eod));
        }
        units.push(UnitSeries { unit_id, cycles });
    }

    let mut ds = Dataset::new(grid_size, units);
    ds.rejected = rejected;
    Ok(ds)
}

/// [`ingest_dataset`] over two files on disk.
pub fn ingest_files(
    curves: impl AsRef<Path>,
    meta: impl AsRef<Path>,
    grid_size: Option<usize>,
) -> Result<Dataset> {
    let c = std::fs::File::open(curves)?;
    let m = std::fs::File::open(meta)?;
    ingest_dataset(c, m, grid_size.unwrap_or(DEFAULT_GRID_SIZE))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arrhenius_values() {
        assert_eq!(arrhenius_z1(24.0).unwrap(), 0.0);
        let hot = 11604.52 / 316.15 - 11604.52 / 297.15;
        assert!((arrhenius_z1(43.0).unwrap() - hot).abs() < 1e-12);
        assert!((hot + 2.3468).abs() < 1e-3);
        let cold = arrhenius_z1(4.0).unwrap();
        assert!((cold - 2.818_166).abs() < 1e-5, "{cold}");
        assert!(arrhenius_z1(-300.0).is_err());
    }

    #[test]
    fn powerlaw_values() {
        assert_eq!(powerlaw_z(2.0, 2.0).unwrap(), 0.0);
        assert!((powerlaw_z(4.0, 2.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-10);
        assert!((powerlaw_z(1.0, 2.0).unwrap() + std::f64::consts::LN_2).abs() < 1e-10);
        assert!(powerlaw_z(0.0, 2.0).is_err());
        assert!(powerlaw_z(1.0, -2.0).is_err());
    }

    #[test]
    fn rest_covariate_values() {
        assert_eq!(rest_covariate(0.0).unwrap(), 0.0);
        assert!((rest_covariate(1.0).unwrap() - 0.367_879_441).abs() < 1e-8);
        assert!((rest_covariate(10.0).unwrap() - 0.904_837_418).abs() < 1e-8);
        assert!((rest_covariate(5.0).unwrap() - 0.818_730_753).abs() < 1e-8);
        assert!(rest_covariate(-1.0).is_err());
    }

    #[test]
    fn battery_baseline_is_zero() {
        let z = CovariateVector::battery(24.0, 2.0, 2.0).unwrap();
        assert_eq!(z.z1(), Some(0.0));
        assert_eq!(z.z2(), Some(0.0));
        assert_eq!(z.z3(), Some(0.0));
    }

    #[test]
    fn three_point_curve_interpolates_at_nodes() {
        let raw = RawCurve::new("u", 1, vec![(0.0, 4.2), (10.0, 3.9), (20.0, 2.7)]).unwrap();
        assert_eq!(raw.eod, 20.0);
        let s = raw.rescale(3);
        assert_eq!(s.values, vec![4.2, 3.9, 2.7]);
    }

    #[test]
    fn raw_curve_rejects_bad_input() {
        assert!(RawCurve::new("u", 1, vec![(0.0, 1.0)]).is_err());
        assert!(RawCurve::new("u", 1, vec![(0.0, 1.0), (2.0, 1.0), (1.0, 0.5)]).is_err());
        let shifted = RawCurve::new("u", 1, vec![(5.0, 1.0), (7.0, 0.5)]).unwrap();
        assert_eq!(shifted.samples[0].0, 0.0);
        assert_eq!(shifted.eod, 2.0);
    }

    #[test]
    fn timestamps_auto_detected() {
        assert_eq!(parse_timestamp("3600").unwrap(), 3600.0);
        let a = parse_timestamp("2008-04-02T13:08:17").unwrap();
        let b = parse_timestamp("2008-04-02 18:08:17").unwrap();
        assert!((b - a - 5.0 * 3600.0).abs() < 1e-6);
        assert!(parse_timestamp("2008-04-02T13:08:17Z").is_ok());
        assert!(parse_timestamp("yesterday").is_err());
    }

    fn meta_csv(rows: &[(&str, u32, &str)]) -> String {
        let mut s = String::from("unit_id,temp_C,dc_A,sv_V,cycle,start_timestamp\n");
        for (u, c, ts) in rows {
            s.push_str(&format!("{u},24,2,2.7,{c},{ts}\n"));
        }
        s
    }

    #[test]
    fn ingest_reindexes_and_computes_rest() {
        let mut curves = String::from("unit_id,cycle,time_s,voltage\n");
        for c in [3, 7, 9] {
            for (t, v) in [(0.0, 4.2), (10.0, 3.9), (20.0 + c as f64, 2.7)] {
                curves.push_str(&format!("B1,{c},{t},{v}\n"));
            }
        }
        let meta = meta_csv(&[(("B1"), 3, "0"), ("B1", 7, "18000"), ("B1", 9, "21600")]);
        let ds = ingest_dataset(curves.as_bytes(), meta.as_bytes(), 5).unwrap();
        let u = &ds.units[0];
        let cycles: Vec<u32> = u.cycles.iter().map(|r| r.cycle).collect();
        assert_eq!(cycles, vec![1, 2, 3]);
        assert_eq!(u.cycles[0].rest_hours, 0.0);
        assert!((u.cycles[1].rest_hours - 5.0).abs() < 1e-12);
        assert!((u.cycles[1].rest_covariate() - (-0.2f64).exp()).abs() < 1e-12);
        assert_eq!(u.cycles[0].prev_eod, 0.0);
        assert_eq!(u.cycles[1].prev_eod, 23.0);
        assert_eq!(u.cycles[2].eod, 29.0);
        ds.validate().unwrap();
    }

    #[test]
    fn ingest_rejects_short_and_nonmonotone_cycles() {
        let curves = "unit_id,cycle,time_s,voltage\n\
                      B1,1,0,4.1\nB1,1,5,3.0\n\
                      B1,2,0,4.1\n\
                      B1,3,0,4.1\nB1,3,5,3.5\nB1,3,4,3.0\n\
                      B1,4,0,4.0\nB1,4,6,3.0\n";
        let meta = meta_csv(&[("B1", 1, "0"), ("B1", 2, "3600"), ("B1", 3, "7200"), ("B1", 4, "10800")]);
        let ds = ingest_dataset(curves.as_bytes(), meta.as_bytes(), 4).unwrap();
        assert_eq!(ds.rejected.len(), 2);
        let u = &ds.units[0];
        assert_eq!(u.n_cycles(), 2);
        assert_eq!(u.cycles[1].cycle, 2);
        assert!((u.cycles[1].rest_hours - 3.0).abs() < 1e-12);
    }

    #[test]
    fn ingest_missing_metadata_names_unit() {
        let curves = "unit_id,cycle,time_s,voltage\nB7,1,0,4.1\nB7,1,5,3.0\n";
        let meta = meta_csv(&[("B1", 1, "0")]);
        let err = ingest_dataset(curves.as_bytes(), meta.as_bytes(), 4).unwrap_err();
        assert!(err.to_string().contains("B7"), "{err}");
    }
}
