//! Synthetic degradation data: EODs from a linear or functional mixed model,
//! scaled curves from a three-component expansion with mixed-model scores.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{rest_covariate, CovariateVector, CycleRecord, Dataset, ScaledCurve, UnitSeries};
use crate::degradation::{degradation_amount, lp_norm_scaled};
use crate::error::{Error, Result};
use crate::grid::{self, DEFAULT_GRID_SIZE};

pub use crate::eod::EodKind;

/// Generating parameters. Defaults are the standard study values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationParams {
    pub alpha0_lme: f64,
    pub alpha0_flmm: f64,
    /// Cycle slope (linear model only).
    pub alpha1: f64,
    /// Lag coefficient.
    pub alpha2: f64,
    /// Rest coefficient.
    pub alpha3: f64,
    /// Unit covariate coefficient (linear model only).
    pub alpha4: f64,
    pub sd_intercept_lme: f64,
    pub sd_intercept_flmm: f64,
    /// SD of the random cycle slope (linear model).
    pub sd_cycle: f64,
    /// SD of the random lag slope (functional model).
    pub sd_lag: f64,
    pub sd_eps: f64,
    /// SD of the coefficients of the random coefficient function.
    pub sd_coef_fn: f64,
    pub score_intercept: [f64; 3],
    pub score_cycle: [f64; 3],
    pub score_covariate: [f64; 3],
    pub sd_score_effects: f64,
    pub sd_score_noise: f64,
    pub long_break_every: u32,
    pub long_rest_mean: f64,
    pub long_rest_sd: f64,
    pub short_rest_mean: f64,
    pub short_rest_sd: f64,
}

impl Default for SimulationParams {
    fn default() -> Self {
        Self {
            alpha0_lme: 9.0,
            alpha0_flmm: 3.0,
            alpha1: -0.06,
            alpha2: 0.05,
            alpha3: 1.0,
            alpha4: 1.0,
            sd_intercept_lme: 0.9,
            sd_intercept_flmm: 0.3,
            sd_cycle: 0.006,
            sd_lag: 0.005,
            sd_eps: 0.1,
            sd_coef_fn: 0.05,
            score_intercept: [1.0, 0.1, -0.1],
            score_cycle: [-0.02, 0.0, 0.0],
            score_covariate: [0.025, 0.02, 0.015],
            sd_score_effects: 0.001,
            sd_score_noise: 0.05,
            long_break_every: 10,
            long_rest_mean: 10.0,
            long_rest_sd: 2.0,
            short_rest_mean: 1.0,
            short_rest_sd: 0.1,
        }
    }
}

impl SimulationParams {
    /// Same parameters with every random-effect and noise SD set to zero.
    pub fn noiseless(mut self) -> Self {
        self.sd_intercept_lme = 0.0;
        self.sd_intercept_flmm = 0.0;
        self.sd_cycle = 0.0;
        self.sd_lag = 0.0;
        self.sd_eps = 0.0;
        self.sd_coef_fn = 0.0;
        self.sd_score_effects = 0.0;
        self.sd_score_noise = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulationConfig {
    pub n_units: usize,
    pub n_cycles: usize,
    pub train_ratio: f64,
    pub model: EodKind,
    pub replications: usize,
    pub seed: u64,
    pub grid_size: usize,
    pub params: SimulationParams,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            n_units: 20,
            n_cycles: 50,
            train_ratio: 0.8,
            model: EodKind::Lme,
            replications: 20,
            seed: 1,
            grid_size: DEFAULT_GRID_SIZE,
            params: SimulationParams::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_units < 2 {
            return Err(Error::invalid("need at least 2 units"));
        }
        if self.n_cycles < 2 {
            return Err(Error::invalid("need at least 2 cycles per unit"));
        }
        if !(self.train_ratio > 0.0 && self.train_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "training ratio {} outside (0, 1)",
                self.train_ratio
            )));
        }
        if self.grid_size < 2 {
            return Err(Error::invalid("grid size must be at least 2"));
        }
        Ok(())
    }
}

/// True quantities of one simulated unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitTruth {
    pub unit_id: String,
    pub z: f64,
    /// EOD random effects: (intercept, cycle slope) or (intercept, lag slope).
    pub eod_effects: Vec<f64>,
    /// Coefficients of the random coefficient function on (1, sin 2πt, cos 2πt).
    pub coef_fn: [f64; 3],
    pub score_u0: [f64; 3],
    pub score_u1: [f64; 3],
    /// True FPC scores per cycle.
    pub scores: Vec<[f64; 3]>,
    /// True degradation amounts per cycle (L1 norm).
    pub degradation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: EodKind,
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    /// Fixed coefficient function on the grid.
    pub beta: Vec<f64>,
    pub units: Vec<UnitTruth>,
    /// EOD draws rejected for being non-positive and redrawn.
    pub resampled_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedData {
    pub dataset: Dataset,
    pub truth: GroundTruth,
}

/// Mean function 0.75 log(60 − 59.5 t).
pub fn true_mean(t: f64) -> f64 {
    0.75 * (60.0 - 59.5 * t).ln()
}

/// Eigenfunctions 1, √2 sin 2πt, √2 cos 2πt.
pub fn true_eigenfunction(j: usize, t: f64) -> f64 {
    match j {
        0 => 1.0,
        1 => 2f64.sqrt() * (2.0 * PI * t).sin(),
        2 => 2f64.sqrt() * (2.0 * PI * t).cos(),
        _ => panic!("only three eigenfunctions"),
    }
}

/// Coefficient function 3 − 4t + sin πt.
pub fn true_beta(t: f64) -> f64 {
    3.0 - 4.0 * t + (PI * t).sin()
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of a stream identified by (master, a, b); independent of evaluation order.
pub fn derive_seed(master: u64, a: u64, b: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ a.wrapping_mul(0xA24B_AED4_963E_E407)) ^ b.wrapping_mul(0x9FB2_1C65_1E98_DF25))
}

pub fn unit_id(index: usize, n_units: usize) -> String {
    let width = n_units.to_string().len().max(3);
    format!("U{:0width$}", index + 1)
}

const MAX_REDRAWS: usize = 1000;

/// Generate one dataset with the RNG stream of (seed, cell, replicate).
pub fn generate_dataset(config: &SimulationConfig, cell: u64, replicate: u64) -> Result<SimulatedData> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, cell, replicate));
    let p = &config.params;
    let g = config.grid_size;
    let t = grid::uniform_grid(g);
    let mean: Vec<f64> = t.iter().map(|&t| true_mean(t)).collect();
    let phis: Vec<Vec<f64>> = (0..3)
        .map(|j| t.iter().map(|&t| true_eigenfunction(j, t)).collect())
        .collect();
    let beta: Vec<f64> = t.iter().map(|&t| true_beta(t)).collect();
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let normal = |rng: &mut ChaCha8Rng, sd: f64| if sd > 0.0 { sd * std.sample(rng) } else { 0.0 };

    let mut units = Vec::with_capacity(config.n_units);
    let mut truths = Vec::with_capacity(config.n_units);
    let mut resampled = 0usize;
    for i in 0..config.n_units {
        let id = unit_id(i, config.n_units);
        let z: f64 = rng.random::<f64>();
        let (w0, w1) = match config.model {
            EodKind::Lme => (normal(&mut rng, p.sd_intercept_lme), normal(&mut rng, p.sd_cycle)),
            EodKind::Flmm => (normal(&mut rng, p.sd_intercept_flmm), normal(&mut rng, p.sd_lag)),
        };
        let coef_fn = match config.model {
            EodKind::Lme => [0.0; 3],
            EodKind::Flmm => [
                normal(&mut rng, p.sd_coef_fn),
                normal(&mut rng, p.sd_coef_fn),
                normal(&mut rng, p.sd_coef_fn),
            ],
        };
        let mut u0 = [0.0; 3];
        let mut u1 = [0.0; 3];
        for j in 0..3 {
            u0[j] = normal(&mut rng, p.sd_score_effects);
            u1[j] = normal(&mut rng, p.sd_score_effects);
        }
        // β + b_i on the grid
        let slope_fn: Vec<f64> = t
            .iter()
            .zip(&beta)
            .map(|(&t, b)| {
                b + coef_fn[0] + coef_fn[1] * (2.0 * PI * t).sin() + coef_fn[2] * (2.0 * PI * t).cos()
            })
            .collect();

        let covariates = CovariateVector::new().with("z", z);
        let mut cycles = Vec::with_capacity(config.n_cycles);
        let mut scores_truth = Vec::with_capacity(config.n_cycles);
        let mut prev = 0.0;
        for c in 1..=config.n_cycles as u32 {
            let rest_hours = if c == 1 {
                0.0
            } else if c % p.long_break_every == 0 {
                (p.long_rest_mean + normal(&mut rng, p.long_rest_sd)).max(0.0)
            } else {
                (p.short_rest_mean + normal(&mut rng, p.short_rest_sd)).max(0.0)
            };
            let rest = rest_covariate(rest_hours)?;
            let cf = c as f64;
            let mut score = [0.0; 3];
            for j in 0..3 {
                score[j] = p.score_intercept[j]
                    + u0[j]
                    + (p.score_cycle[j] + u1[j]) * cf
                    + p.score_covariate[j] * z
                    + normal(&mut rng, p.sd_score_noise);
            }
            let values: Vec<f64> = (0..g)
                .map(|k| mean[k] + score[0] * phis[0][k] + score[1] * phis[1][k] + score[2] * phis[2][k])
                .collect();
            let mean_part = match config.model {
                EodKind::Lme => {
                    p.alpha0_lme + w0 + (p.alpha1 + w1) * cf + p.alpha2 * prev + p.alpha3 * rest + p.alpha4 * z
                }
                EodKind::Flmm => {
                    p.alpha0_flmm + w0 + (p.alpha2 + w1) * prev + p.alpha3 * rest + grid::inner_product(&slope_fn, &values)
                }
            };
            let mut eod = mean_part + normal(&mut rng, p.sd_eps);
            let mut tries = 0;
            while !(eod > 0.0) {
                tries += 1;
                resampled += 1;
                if tries > MAX_REDRAWS || p.sd_eps == 0.0 {
                    return Err(Error::invalid(format!(
                        "unit {id} cycle {c}: EOD mean {mean_part:.4} stays non-positive after redrawing noise"
                    )));
                }
                eod = mean_part + normal(&mut rng, p.sd_eps);
            }
            cycles.push(CycleRecord {
                unit_id: id.clone(),
                cycle: c,
                eod,
                rest_hours,
                prev_eod: prev,
                covariates: covariates.clone(),
                scaled: ScaledCurve {
                    unit_id: id.clone(),
                    cycle: c,
                    values,
                },
            });
            scores_truth.push(score);
            prev = eod;
        }
        let norms: Vec<f64> = cycles
            .iter()
            .map(|r| lp_norm_scaled(&r.scaled.values, r.eod, 1.0))
            .collect::<Result<_>>()?;
        let degradation = norms
            .iter()
            .enumerate()
            .map(|(k, &nrm)| if k == 0 { Ok(0.0) } else { degradation_amount(norms[0], nrm) })
            .collect::<Result<Vec<f64>>>()?;
        truths.push(UnitTruth {
            unit_id: id.clone(),
            z,
            eod_effects: vec![w0, w1],
            coef_fn,
            score_u0: u0,
            score_u1: u1,
            scores: scores_truth,
            degradation,
        });
        units.push(UnitSeries { unit_id: id, cycles });
    }
    Ok(SimulatedData {
        dataset: Dataset::new(g, units),
        truth: GroundTruth {
            model: config.model,
            grid: t,
            mean,
            eigenfunctions: phis,
            beta,
            units: truths,
            resampled_draws: resampled,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(model: EodKind) -> SimulationConfig {
        SimulationConfig {
            n_units: 4,
            n_cycles: 30,
            model,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_first_eod() {
        let mut c = cfg(EodKind::Lme);
        c.params = SimulationParams {
            alpha4: 0.0,
            ..SimulationParams::default().noiseless()
        };
        let sim = generate_dataset(&c, 0, 0).unwrap();
        let rec = &sim.dataset.units[0].cycles[0];
        assert!((rec.eod - 8.94).abs() < 1e-12);
        assert_eq!(rec.prev_eod, 0.0);
        assert_eq!(rec.rest_hours, 0.0);
    }

    #[test]
    fn noiseless_scores_follow_trend() {
        let mut c = cfg(EodKind::Lme);
        c.params = SimulationParams {
            score_covariate: [0.0; 3],
            ..SimulationParams::default().noiseless()
        };
        let sim = generate_dataset(&c, 0, 0).unwrap();
        for (k, s) in sim.truth.units[1].scores.iter().enumerate() {
            assert!((s[0] - (1.0 - 0.02 * (k + 1) as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn rest_schedule_and_truth() {
        let sim = generate_dataset(&cfg(EodKind::Flmm), 3, 7).unwrap();
        sim.dataset.validate().unwrap();
        for u in &sim.dataset.units {
            for r in &u.cycles {
                if r.cycle == 1 {
                    assert_eq!(r.rest_hours, 0.0);
                } else if r.cycle % 10 == 0 {
                    assert!(r.rest_hours > 2.0);
                } else {
                    assert!((r.rest_hours - 1.0).abs() < 1.0);
                }
            }
        }
        for t in &sim.truth.units {
            assert_eq!(t.degradation[0], 0.0);
        }
    }

    #[test]
    fn reproducible_streams() {
        let a = generate_dataset(&cfg(EodKind::Lme), 1, 2).unwrap();
        let b = generate_dataset(&cfg(EodKind::Lme), 1, 2).unwrap();
        let c = generate_dataset(&cfg(EodKind::Lme), 1, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn projection_recovers_scores() {
        let sim = generate_dataset(&cfg(EodKind::Lme), 0, 0).unwrap();
        let rec = &sim.dataset.units[2].cycles[5];
        let centered: Vec<f64> = rec.scaled.values.iter().zip(&sim.truth.mean).map(|(x, m)| x - m).collect();
        for j in 0..3 {
            let s = grid::inner_product(&centered, &sim.truth.eigenfunctions[j]);
            assert!((s - sim.truth.units[2].scores[5][j]).abs() < 1e-9);
        }
    }
}
