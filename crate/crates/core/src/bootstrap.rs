//! Fractional random weight bootstrap prediction intervals for degradation
//! amounts.
//!
//! Every replicate draws Dirichlet unit weights, refits the score and EOD
//! models with those weights (FPCA stays fixed), predicts the test cycles
//! and shifts them by one residual drawn from the pooled training residuals
//! of that replicate. Interval bounds are empirical quantiles across
//! replicates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::degradation::{DegradationPath, Source};
use crate::eod::EodKind;
use crate::error::{Error, Result};
use crate::pipeline::{predict_all, PipelineConfig, TrainingSet, UnitPrediction};
use crate::simulator::derive_seed;

/// Stream tag separating bootstrap seeds from simulation seeds.
const STREAM: u64 = 0xB0_07;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Coverage levels; every level gets its own interval.
    pub levels: Vec<f64>,
    pub seed: u64,
    /// Dirichlet parameters per unit (all 1 when absent).
    pub dirichlet: Option<Vec<f64>>,
    /// Draw a separate training residual for every prediction instead of one per replicate.
    pub per_prediction_residuals: bool,
    /// Share of failed replicates above which the result is flagged.
    pub max_drop_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 5000,
            levels: vec![0.95],
            seed: 1,
            dirichlet: None,
            per_prediction_residuals: false,
            max_drop_fraction: 0.05,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self, n_units: usize) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::invalid("at least 2 bootstrap replicates are required"));
        }
        if self.levels.is_empty() || self.levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) {
            return Err(Error::invalid("interval levels must lie strictly between 0 and 1"));
        }
        if let Some(d) = &self.dirichlet {
            if d.len() != n_units {
                return Err(Error::invalid(format!(
                    "{} Dirichlet parameters for {n_units} units",
                    d.len()
                )));
            }
            if d.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
                return Err(Error::invalid("Dirichlet parameters must be positive"));
            }
        }
        Ok(())
    }
}

/// Dirichlet(λ) draw scaled so the weights sum to n.
pub fn draw_unit_weights<R: Rng + ?Sized>(n: usize, dirichlet: Option<&[f64]>, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("no units to weight"));
    }
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let raw: Vec<f64> = match dirichlet {
        Some(l) if l.iter().any(|v| *v != 1.0) => l
            .iter()
            .map(|&a| {
                Gamma::new(a, 1.0)
                    .map(|g| g.sample(rng))
                    .map_err(|e| Error::invalid(format!("Dirichlet parameter {a}: {e}")))
            })
            .collect::<Result<_>>()?,
        _ => (0..n).map(|_| Exp1.sample(rng)).collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|v| v / total * n as f64).collect())
}

/// Type-7 sample quantile (linear interpolation between order statistics)
/// of already sorted values.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalRow {
    pub unit_id: String,
    pub cycle: u32,
    /// Prediction of the unweighted fit.
    pub point: f64,
    pub observed: f64,
    pub level: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapResult {
    pub replicates: usize,
    pub dropped: usize,
    /// More than the allowed share of replicates failed.
    pub unreliable: bool,
    pub levels: Vec<f64>,
    pub intervals: Vec<IntervalRow>,
    /// Point predictions of the unweighted fit for every cycle.
    pub point: Vec<UnitPrediction>,
}

impl BootstrapResult {
    /// Share of test cycles whose observed amount lies inside the interval at `level`.
    pub fn coverage(&self, level: f64) -> Option<f64> {
        let rows: Vec<&IntervalRow> = self.intervals.iter().filter(|r| r.level == level).collect();
        if rows.is_empty() {
            return None;
        }
        let hit = rows.iter().filter(|r| r.lower <= r.observed && r.observed <= r.upper).count();
        Some(hit as f64 / rows.len() as f64)
    }

    /// Point paths with the bounds of `level` attached to the predicted entries.
    pub fn paths(&self, level: f64, threshold: Option<f64>) -> Result<Vec<DegradationPath>> {
        let mut out = Vec::with_capacity(self.point.len());
        for u in &self.point {
            let mut p = u.path(threshold)?;
            for e in &mut p.entries {
                if let Some(r) = self
                    .intervals
                    .iter()
                    .find(|r| r.level == level && r.unit_id == u.unit_id && r.cycle == e.cycle)
                {
                    e.lower = Some(r.lower);
                    e.upper = Some(r.upper);
                }
            }
            out.push(p);
        }
        Ok(out)
    }
}

/// Bootstrap intervals for every test cycle of every unit.
pub fn bootstrap_prediction_intervals(
    dataset: &Dataset,
    config: &PipelineConfig,
    boot: &BootstrapConfig,
) -> Result<BootstrapResult> {
    if config.eod_model != EodKind::Lme {
        return Err(Error::invalid("bootstrap intervals are defined for the linear EOD model"));
    }
    let ts = TrainingSet::new(dataset, config)?;
    let ids = ts.unit_ids();
    boot.validate(ids.len())?;
    let point_model = ts.fit(config)?;
    let point = predict_all(&point_model, &ts.prepared)?;

    let replicate = |b: usize| -> Option<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(boot.seed, STREAM, b as u64));
        let w = draw_unit_weights(ids.len(), boot.dirichlet.as_deref(), &mut rng).ok()?;
        let model = ts.fit_weighted(config, &w, Some(&point_model)).ok()?;
        let preds = predict_all(&model, &ts.prepared).ok()?;
        let residuals: Vec<f64> = preds
            .iter()
            .flat_map(|u| u.cycles.iter())
            .filter(|c| c.source == Source::Fitted)
            .map(|c| c.d_obs - c.d_hat)
            .collect();
        if residuals.is_empty() {
            return None;
        }
        let shared = residuals[rng.random_range(0..residuals.len())];
        let out: Vec<f64> = preds
            .iter()
            .flat_map(|u| u.cycles.iter())
            .filter(|c| c.source == Source::Predicted)
            .map(|c| {
                let e = if boot.per_prediction_residuals {
                    residuals[rng.random_range(0..residuals.len())]
                } else {
                    shared
                };
                c.d_hat + e
            })
            .collect();
        out.iter().all(|v| v.is_finite()).then_some(out)
    };
    let draws: Vec<Option<Vec<f64>>> = (0..boot.replicates).into_par_iter().map(replicate).collect();
    let ok: Vec<Vec<f64>> = draws.into_iter().flatten().collect();
    let dropped = boot.replicates - ok.len();
    if ok.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "only {} of {} bootstrap replicates succeeded",
            ok.len(),
            boot.replicates
        )));
    }

    let targets: Vec<(&str, u32, f64, f64)> = point
        .iter()
        .flat_map(|u| {
            u.cycles
                .iter()
                .filter(|c| c.source == Source::Predicted)
                .map(move |c| (u.unit_id.as_str(), c.cycle, c.d_hat, c.d_obs))
        })
        .collect();
    let mut intervals = Vec::with_capacity(targets.len() * boot.levels.len());
    for (j, &(unit, cycle, pt, obs)) in targets.iter().enumerate() {
        let mut vals: Vec<f64> = ok.iter().map(|r| r[j]).collect();
        vals.sort_by(f64::total_cmp);
        for &level in &boot.levels {
            let a = (1.0 - level) / 2.0;
            intervals.push(IntervalRow {
                unit_id: unit.to_string(),
                cycle,
                point: pt,
                observed: obs,
                level,
                lower: quantile_sorted(&vals, a),
                upper: quantile_sorted(&vals, 1.0 - a),
            });
        }
    }
    let unreliable = dropped as f64 > boot.max_drop_fraction * boot.replicates as f64;
    if unreliable {
        log::warn!("{dropped} of {} bootstrap replicates failed", boot.replicates);
    }
    Ok(BootstrapResult {
        replicates: boot.replicates,
        dropped,
        unreliable,
        levels: boot.levels.clone(),
        intervals,
        point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(draw_unit_weights(1, None, &mut rng).unwrap(), vec![1.0]);
        for n in [2, 5, 40] {
            let w = draw_unit_weights(n, None, &mut rng).unwrap();
            assert!((w.iter().sum::<f64>() - n as f64).abs() < 1e-12);
            assert!(w.iter().all(|v| *v >= 0.0));
        }
        let w = draw_unit_weights(3, Some(&[0.5, 2.0, 4.0]), &mut rng).unwrap();
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-12);
        assert!(draw_unit_weights(0, None, &mut rng).is_err());
    }

    #[test]
    fn weight_means_match_dirichlet_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let lambda = [1.0, 2.0, 3.0, 4.0];
        let draws = 10_000;
        for params in [None, Some(&lambda[..])] {
            let mut sum = vec![0.0; n];
            let mut sq = vec![0.0; n];
            for _ in 0..draws {
                let w = draw_unit_weights(n, params, &mut rng).unwrap();
                for i in 0..n {
                    sum[i] += w[i];
                    sq[i] += w[i] * w[i];
                }
            }
            let total: f64 = params.map_or(n as f64, |l| l.iter().sum());
            for i in 0..n {
                let mean = sum[i] / draws as f64;
                let var = sq[i] / draws as f64 - mean * mean;
                let expect = n as f64 * params.map_or(1.0, |l| l[i]) / total;
                let se = (var / draws as f64).sqrt();
                assert!((mean - expect).abs() < 3.0 * se, "{i}: {mean} vs {expect} (se {se})");
            }
        }
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        // h = 4p: p = 0.025 → 1.1; p = 0.975 → 4.9
        assert!((quantile_sorted(&v, 0.025) - 1.1).abs() < 1e-12);
        assert!((quantile_sorted(&v, 0.975) - 4.9).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.5), 3.0);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 5.0);
        assert_eq!(quantile_sorted(&[7.0], 0.3), 7.0);
        assert!(quantile_sorted(&[], 0.3).is_nan());
    }

    #[test]
    fn config_validation() {
        let c = BootstrapConfig::default();
        assert!(c.validate(3).is_ok());
        assert!(BootstrapConfig { replicates: 1, ..c.clone() }.validate(3).is_err());
        assert!(BootstrapConfig { levels: vec![1.0], ..c.clone() }.validate(3).is_err());
        assert!(BootstrapConfig { dirichlet: Some(vec![1.0, 1.0]), ..c.clone() }.validate(3).is_err());
        assert!(BootstrapConfig { dirichlet: Some(vec![1.0, 0.0, 1.0]), ..c }.validate(3).is_err());
    }
}
