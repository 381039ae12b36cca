//! Scalar degradation amounts from curve norms, degradation paths and the
//! pooled error metrics used for evaluation.

use serde::{Deserialize, Serialize};

use crate::data::RawCurve;
use crate::error::{Error, Result};
use crate::grid;

/// (∫_0^b |y(r)|^p dr)^{1/p} by the trapezoid rule over the raw samples.
pub fn lp_norm(curve: &RawCurve, p: f64) -> Result<f64> {
    check_p(p)?;
    let r: Vec<f64> = curve.samples.iter().map(|s| s.0).collect();
    let y: Vec<f64> = curve.samples.iter().map(|s| s.1.abs().powf(p)).collect();
    Ok(grid::trapezoid(&r, &y).powf(1.0 / p))
}

/// Norm of y(r) = x(r / b) through the change of variables (b ∫_0^1 |x|^p)^{1/p}.
pub fn lp_norm_scaled(values: &[f64], eod: f64, p: f64) -> Result<f64> {
    check_p(p)?;
    if !(eod > 0.0) {
        return Err(Error::invalid(format!("EOD must be positive, got {eod}")));
    }
    let ip: Vec<f64> = values.iter().map(|v| v.abs().powf(p)).collect();
    Ok((eod * grid::integrate_unit(&ip)).powf(1.0 / p))
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::invalid(format!("norm order p must be >= 1, got {p}")));
    }
    Ok(())
}

/// Relative norm loss (Υ_1 − Υ_c) / Υ_1; negative when the norm grew.
pub fn degradation_amount(first_norm: f64, current_norm: f64) -> Result<f64> {
    if !(first_norm > 0.0) {
        return Err(Error::invalid(format!(
            "first-cycle norm must be positive, got {first_norm}"
        )));
    }
    Ok((first_norm - current_norm) / first_norm)
}

/// Cycle index ñ of the first test cycle: floor(n · ratio) + 1.
///
/// A tiny tolerance keeps products such as 100 · 0.29 from flooring one short.
pub fn split_point(n_cycles: usize, train_ratio: f64) -> usize {
    (n_cycles as f64 * train_ratio + 1e-9).floor() as usize + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Observed,
    Fitted,
    Predicted,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Observed => "observed",
            Source::Fitted => "fitted",
            Source::Predicted => "predicted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEntry {
    pub cycle: u32,
    pub d: f64,
    pub source: Source,
    /// Predicted EOD (or observed EOD for observed entries).
    pub eod: f64,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Set when a failure threshold is attached and `d` exceeds it.
    #[serde(default)]
    pub exceeds_threshold: bool,
}

/// Degradation amounts of one unit over cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationPath {
    pub unit_id: String,
    pub entries: Vec<PathEntry>,
    pub threshold: Option<f64>,
}

impl DegradationPath {
    pub fn new(unit_id: impl Into<String>) -> Self {
        Self {
            unit_id: unit_id.into(),
            entries: Vec::new(),
            threshold: None,
        }
    }

    pub fn push(&mut self, cycle: u32, d: f64, eod: f64, source: Source) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if cycle <= last.cycle {
                return Err(Error::invalid(format!(
                    "path cycles must increase: {cycle} after {}",
                    last.cycle
                )));
            }
        }
        let exceeds_threshold = self.threshold.is_some_and(|t| d > t);
        self.entries.push(PathEntry {
            cycle,
            d,
            source,
            eod,
            lower: None,
            upper: None,
            exceeds_threshold,
        });
        Ok(())
    }

    /// Attach a soft-failure threshold and flag the entries above it.
    pub fn set_threshold(&mut self, threshold: Option<f64>) {
        self.threshold = threshold;
        for e in &mut self.entries {
            e.exceeds_threshold = threshold.is_some_and(|t| e.d > t);
        }
    }

    /// First cycle whose amount exceeds the threshold.
    pub fn first_crossing(&self) -> Option<u32> {
        self.entries.iter().find(|e| e.exceeds_threshold).map(|e| e.cycle)
    }

    pub fn entry(&self, cycle: u32) -> Option<&PathEntry> {
        self.entries.iter().find(|e| e.cycle == cycle)
    }
}

/// Observed path of a unit from its curves: d_1 = 0 by construction.
pub fn observed_path(unit_id: &str, norms: &[(u32, f64, f64)]) -> Result<DegradationPath> {
    let mut path = DegradationPath::new(unit_id);
    let Some(&(_, first, _)) = norms.first() else {
        return Ok(path);
    };
    for (k, &(cycle, norm, eod)) in norms.iter().enumerate() {
        let d = if k == 0 { 0.0 } else { degradation_amount(first, norm)? };
        path.push(cycle, d, eod, Source::Observed)?;
    }
    Ok(path)
}

/// sqrt(Σ e / N) over pooled squared errors; errors on an empty set.
pub fn pooled_rms(squared_errors: impl IntoIterator<Item = f64>) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in squared_errors {
        sum += e;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientData("no cycles to evaluate".into()));
    }
    Ok((sum / n as f64).sqrt())
}

/// ∫_0^1 (a − b)^2 on the common grid.
pub fn curve_squared_error(a: &[f64], b: &[f64]) -> Result<f64> {
    grid::check_grid(a.len(), b.len())?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(grid::integrate_unit(&d))
}

/// Training (RMSE) and test (RMSPE) error of one quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorPair {
    pub rmse: f64,
    pub rmspe: f64,
}
