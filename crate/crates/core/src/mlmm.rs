//! Multivariate mixed model for FPC scores.
//!
//! Each cycle's K-vector of scores is modeled as
//! `γ = (v0 + u0_i) + (v1 + u1_i) c + P z + δ`, with (u0_i, u1_i) ~ N(0, Σ_U)
//! and δ ~ N(0, Σ_δ) independent across cycles.

use std::collections::HashMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{CovariateVector, CycleRecord};
use crate::error::{Error, Result};
use crate::fpca::ScoreVector;
use crate::lmm::{self, LmmFit, LmmOptions, LmmProblem, Row};

/// Random effects of one unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitScoreEffects {
    pub unit_id: String,
    pub u0: Vec<f64>,
    pub u1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlmmFit {
    pub k: usize,
    pub covariate_names: Vec<String>,
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    /// K × m covariate coefficients, one row per score component.
    pub p: Vec<Vec<f64>>,
    /// 2K × 2K covariance of (u0, u1).
    pub sigma_u: DMatrix<f64>,
    pub sigma_delta: DMatrix<f64>,
    pub blups: Vec<UnitScoreEffects>,
    pub loglik_reml: f64,
    pub converged: bool,
    /// Underlying engine fit (standard errors, optimizer trace, warm-start parameters).
    pub engine: LmmFit,
}

/// Training data for the score model, grouped by unit (units sorted by id).
#[derive(Debug, Clone)]
pub struct MlmmData {
    problem: LmmProblem,
    covariates: Vec<String>,
}

fn fixed_names(covariates: &[String]) -> Vec<String> {
    let mut names = vec!["(Intercept)".to_string(), "cycle".to_string()];
    names.extend(covariates.iter().cloned());
    names
}

impl MlmmData {
    /// Pair every record with its score vector (matched on unit and cycle).
    pub fn new(scores: &[ScoreVector], records: &[&CycleRecord], covariates: &[String]) -> Result<Self> {
        let by_key: HashMap<(&str, u32), &ScoreVector> = scores
            .iter()
            .map(|s| ((s.unit_id.as_str(), s.cycle), s))
            .collect();
        let mut rows: Vec<(&CycleRecord, &[f64])> = Vec::with_capacity(records.len());
        for r in records {
            let s = by_key
                .get(&(r.unit_id.as_str(), r.cycle))
                .ok_or_else(|| Error::invalid(format!("no scores for unit {} cycle {}", r.unit_id, r.cycle)))?;
            rows.push((r, &s.scores));
        }
        Self::from_rows(&rows, covariates)
    }

    /// Build from (record, scores) pairs.
    pub fn from_rows(rows: &[(&CycleRecord, &[f64])], covariates: &[String]) -> Result<Self> {
        let k = rows
            .first()
            .map(|(_, s)| s.len())
            .ok_or_else(|| Error::InsufficientData("no score observations".into()))?;
        if k == 0 {
            return Err(Error::invalid("empty score vectors"));
        }
        let mut units: Vec<&str> = rows.iter().map(|(r, _)| r.unit_id.as_str()).collect();
        units.sort_unstable();
        units.dedup();
        let mut problem = LmmProblem::new(
            k,
            fixed_names(covariates),
            vec!["(Intercept)".into(), "cycle".into()],
        );
        for unit in units {
            let mut xs: Vec<(Vec<f64>, &[f64])> = Vec::new();
            for (rec, s) in rows.iter().filter(|(r, _)| r.unit_id == unit) {
                if s.len() != k {
                    return Err(Error::invalid("score vectors differ in length"));
                }
                xs.push((design_row(rec.cycle as f64, &rec.covariates, covariates)?, s));
            }
            problem.add_group(
                unit,
                xs.iter().map(|(x, y)| Row { y, x, e: &x[..2] }),
            )?;
        }
        Ok(Self {
            problem,
            covariates: covariates.to_vec(),
        })
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.problem.groups.iter().map(|g| g.id.clone()).collect()
    }

    pub fn n_units(&self) -> usize {
        self.problem.groups.len()
    }

    pub fn fit(&self, opts: &LmmOptions) -> Result<MlmmFit> {
        self.fit_weighted(&vec![1.0; self.n_units()], opts, None)
    }

    /// Weighted fit; `weights` are aligned with [`MlmmData::unit_ids`].
    pub fn fit_weighted(&self, weights: &[f64], opts: &LmmOptions, start: Option<&MlmmFit>) -> Result<MlmmFit> {
        let engine = lmm::fit_weighted(
            &self.problem,
            weights,
            opts,
            start.map(|f| &f.engine),
        )?;
        Ok(MlmmFit::from_engine(engine, self.covariates.clone()))
    }

    /// Recompute BLUPs after editing the fit's covariance components.
    pub fn refresh_blups(&self, fit: &mut MlmmFit) {
        fit.engine.g = fit.sigma_u.clone();
        fit.engine.sigma = fit.sigma_delta.clone();
        fit.engine.blups = lmm::recompute_blups(&self.problem, &fit.engine);
        fit.blups = split_blups(&fit.engine, fit.k);
    }
}

fn design_row(cycle: f64, z: &CovariateVector, names: &[String]) -> Result<Vec<f64>> {
    let mut x = Vec::with_capacity(2 + names.len());
    x.push(1.0);
    x.push(cycle);
    for name in names {
        x.push(z.get(name).ok_or_else(|| Error::invalid(format!("covariate {name} not found")))?);
    }
    Ok(x)
}

fn split_blups(engine: &LmmFit, k: usize) -> Vec<UnitScoreEffects> {
    engine
        .blups
        .iter()
        .map(|(id, b)| UnitScoreEffects {
            unit_id: id.clone(),
            u0: b[..k].to_vec(),
            u1: b[k..2 * k].to_vec(),
        })
        .collect()
}

impl MlmmFit {
    fn from_engine(engine: LmmFit, covariate_names: Vec<String>) -> Self {
        let k = engine.k;
        let b = engine.coef_matrix();
        let col = |j: usize| b.column(j).iter().copied().collect::<Vec<f64>>();
        let m = covariate_names.len();
        let p = (0..k).map(|r| (0..m).map(|h| b[(r, 2 + h)]).collect()).collect();
        MlmmFit {
            k,
            v0: col(0),
            v1: col(1),
            p,
            sigma_u: engine.g.clone(),
            sigma_delta: engine.sigma.clone(),
            blups: split_blups(&engine, k),
            loglik_reml: engine.loglik,
            converged: engine.converged,
            covariate_names,
            engine,
        }
    }

    pub fn unit_effects(&self, unit_id: &str) -> Option<&UnitScoreEffects> {
        self.blups.iter().find(|b| b.unit_id == unit_id)
    }

    /// Standard errors of (v0, v1, P) in the engine's column-major order.
    pub fn std_errors(&self) -> Vec<f64> {
        self.engine.std_errors()
    }

    /// Predicted scores at cycle `c` for `unit_id`; `population` drops the unit's random effects.
    pub fn predict(&self, unit_id: &str, cycle: f64, z: &CovariateVector, population: bool) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.k];
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.v0[j] + self.v1[j] * cycle;
            for (h, name) in self.covariate_names.iter().enumerate() {
                let v = z
                    .get(name)
                    .ok_or_else(|| Error::invalid(format!("covariate {name} not found")))?;
                *o += self.p[j][h] * v;
            }
        }
        if !population {
            let u = self
                .unit_effects(unit_id)
                .ok_or_else(|| Error::UnknownUnit(unit_id.to_string()))?;
            for (j, o) in out.iter_mut().enumerate() {
                *o += u.u0[j] + u.u1[j] * cycle;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Fit the score model on matched scores and records.
pub fn fit_mlmm(
    scores: &[ScoreVector],
    records: &[&CycleRecord],
    covariates: &[String],
    opts: &LmmOptions,
) -> Result<MlmmFit> {
    MlmmData::new(scores, records, covariates)?.fit(opts)
}

/// Predicted score vector at a future cycle.
pub fn predict_scores(
    fit: &MlmmFit,
    unit_id: &str,
    cycle: u32,
    z: &CovariateVector,
    population: bool,
) -> Result<ScoreVector> {
    Ok(ScoreVector {
        unit_id: unit_id.to_string(),
        cycle,
        scores: fit.predict(unit_id, cycle as f64, z, population)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ScaledCurve;
    use crate::optim::{self, BfgsOptions};
    use nalgebra::DVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn record(unit: &str, cycle: u32, z: f64) -> CycleRecord {
        CycleRecord {
            unit_id: unit.into(),
            cycle,
            eod: 1.0,
            rest_hours: 0.0,
            prev_eod: 0.0,
            covariates: CovariateVector::new().with("z", z),
            scaled: ScaledCurve {
                unit_id: unit.into(),
                cycle,
                values: vec![4.0, 3.0],
            },
        }
    }

    /// K-dimensional scores with unit intercept/slope effects; `sd` = (u0, u1, δ).
    fn simulate(n_units: usize, n_cycles: u32, k: usize, sd: [f64; 3], seed: u64) -> (Vec<CycleRecord>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let (mut recs, mut scores) = (Vec::new(), Vec::new());
        for i in 0..n_units {
            let unit = format!("u{i:02}");
            let z = (i % 3) as f64 - 1.0;
            let u: Vec<(f64, f64)> = (0..k)
                .map(|_| (sd[0] * n01.sample(&mut rng), sd[1] * n01.sample(&mut rng)))
                .collect();
            for c in 1..=n_cycles {
                let s = (0..k)
                    .map(|j| {
                        let scale = 1.0 / (j + 1) as f64;
                        scale * (1.0 - 0.02 * c as f64 + 0.3 * z) + u[j].0 + u[j].1 * c as f64
                            + sd[2] * n01.sample(&mut rng)
                    })
                    .collect();
                recs.push(record(&unit, c, z));
                scores.push(s);
            }
        }
        (recs, scores)
    }

    fn data(recs: &[CycleRecord], scores: &[Vec<f64>]) -> MlmmData {
        let rows: Vec<(&CycleRecord, &[f64])> = recs.iter().zip(scores).map(|(r, s)| (r, s.as_slice())).collect();
        MlmmData::from_rows(&rows, &["z".to_string()]).unwrap()
    }

    /// Dense REML criterion (up to a constant) for one score component, coded
    /// directly from the marginal covariance of each unit.
    fn dense_reml(theta: &[f64], groups: &[(Vec<f64>, Vec<[f64; 3]>)]) -> (f64, DVector<f64>) {
        let l = DMatrix::from_row_slice(2, 2, &[theta[0].exp(), 0.0, theta[1], theta[2].exp()]);
        let g = &l * l.transpose();
        let s2 = (2.0 * theta[3]).exp();
        let mut xtvx = DMatrix::<f64>::zeros(3, 3);
        let mut xtvy = DVector::<f64>::zeros(3);
        let mut logdet = 0.0;
        let mut parts = Vec::new();
        for (y, x) in groups {
            let n = y.len();
            let xm = DMatrix::from_fn(n, 3, |r, c| x[r][c]);
            let zm = xm.columns(0, 2).into_owned();
            let v = &zm * &g * zm.transpose() + DMatrix::identity(n, n) * s2;
            let chol = v.cholesky().expect("V positive definite");
            logdet += 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let vinv = chol.inverse();
            let yv = DVector::from_column_slice(y);
            xtvx += xm.transpose() * &vinv * &xm;
            xtvy += xm.transpose() * &vinv * &yv;
            parts.push((yv, xm, vinv));
        }
        let beta = xtvx.clone().cholesky().unwrap().solve(&xtvy);
        let mut quad = 0.0;
        for (y, x, vinv) in &parts {
            let r = y - x * &beta;
            quad += (r.transpose() * vinv * &r)[(0, 0)];
        }
        let ld_x = 2.0 * xtvx.cholesky().unwrap().l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        (logdet + ld_x + quad, beta)
    }

    #[test]
    fn single_component_matches_dense_oracle() {
        let (recs, scores) = simulate(15, 10, 1, [0.3, 0.02, 0.1], 1);
        let fit = data(&recs, &scores).fit(&LmmOptions::default()).unwrap();
        let mut groups: Vec<(Vec<f64>, Vec<[f64; 3]>)> = Vec::new();
        for (r, s) in recs.iter().zip(&scores) {
            if groups.len() <= r.unit_id[1..].parse::<usize>().unwrap() {
                groups.push((Vec::new(), Vec::new()));
            }
            let g = groups.last_mut().unwrap();
            g.0.push(s[0]);
            g.1.push([1.0, r.cycle as f64, r.covariates.get("z").unwrap()]);
        }
        let opts = BfgsOptions {
            max_iter: 2000,
            f_rel_tol: 1e-14,
            x_tol: 1e-10,
            ..Default::default()
        };
        let res = optim::minimize(|t| dense_reml(t, &groups).0, &[-1.0, 0.0, -3.0, -2.0], &opts);
        let (_, beta) = dense_reml(&res.x, &groups);
        let want = [beta[0], beta[1], beta[2]];
        let got = [fit.v0[0], fit.v1[0], fit.p[0][0]];
        for (a, b) in got.iter().zip(want) {
            assert!((a - b).abs() < 1e-4, "{got:?} vs {want:?}");
        }
        let s2 = (2.0 * res.x[3]).exp();
        assert!((fit.sigma_delta[(0, 0)] - s2).abs() < 1e-4 * s2.max(1e-2));
        let l = DMatrix::from_row_slice(2, 2, &[res.x[0].exp(), 0.0, res.x[1], res.x[2].exp()]);
        let g = &l * l.transpose();
        for (a, b) in fit.sigma_u.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-4, "{} vs {g}", fit.sigma_u);
        }
    }

    #[test]
    fn noiseless_trend_is_recovered() {
        let (recs, scores) = simulate(8, 10, 2, [0.0, 0.0, 0.0], 2);
        let fit = data(&recs, &scores).fit(&LmmOptions::default()).unwrap();
        for j in 0..2 {
            let scale = 1.0 / (j + 1) as f64;
            assert!((fit.v0[j] - scale).abs() < 1e-8, "{:?}", fit.v0);
            assert!((fit.v1[j] + 0.02 * scale).abs() < 1e-8);
            assert!((fit.p[j][0] - 0.3 * scale).abs() < 1e-8);
        }
    }

    #[test]
    fn unit_order_does_not_matter() {
        let (recs, scores) = simulate(10, 8, 2, [0.3, 0.02, 0.1], 3);
        let a = data(&recs, &scores).fit(&LmmOptions::default()).unwrap();
        let (rr, rs): (Vec<CycleRecord>, Vec<Vec<f64>>) = recs.iter().cloned().zip(scores.iter().cloned()).rev().unzip();
        let b = data(&rr, &rs).fit(&LmmOptions::default()).unwrap();
        for (x, y) in a.engine.beta.iter().zip(&b.engine.beta) {
            assert!((x - y).abs() < 1e-8);
        }
        for (x, y) in a.sigma_u.iter().zip(b.sigma_u.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        assert_eq!(a.unit_ids_sorted(), b.unit_ids_sorted());
    }

    #[test]
    fn intercept_prediction_and_population_fallback() {
        let (recs, scores) = simulate(10, 8, 2, [0.3, 0.02, 0.1], 4);
        let d = data(&recs, &scores);
        let mut fit = d.fit(&LmmOptions::default()).unwrap();
        let z0 = CovariateVector::new().with("z", 0.0);
        let at0 = fit.predict("u04", 0.0, &z0, false).unwrap();
        let u = fit.unit_effects("u04").unwrap();
        for ((a, v), u0) in at0.iter().zip(&fit.v0).zip(&u.u0) {
            assert!((a - (v + u0)).abs() < 1e-12);
        }
        fit.sigma_u.fill(0.0);
        d.refresh_blups(&mut fit);
        let z = CovariateVector::new().with("z", 1.0);
        let a = fit.predict("u04", 12.0, &z, false).unwrap();
        let b = fit.predict("u04", 12.0, &z, true).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_covariate_is_flagged() {
        let (mut recs, scores) = simulate(6, 8, 2, [0.3, 0.02, 0.1], 5);
        for r in &mut recs {
            r.covariates.set("z", 0.0);
        }
        match data(&recs, &scores).fit(&LmmOptions::default()) {
            Err(Error::SingularDesign { columns }) => assert!(columns.contains(&"z".to_string()), "{columns:?}"),
            other => panic!("expected a singular design, got {other:?}"),
        }
    }

    impl MlmmFit {
        fn unit_ids_sorted(&self) -> Vec<String> {
            self.blups.iter().map(|b| b.unit_id.clone()).collect()
        }
    }
}
