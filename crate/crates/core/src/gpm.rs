//! General path model for scalar degradation amounts: the comparison baseline.
//!
//! Linear path `d_ic = β0 + (β1 + ξ_i) c + β_lag d_{i,c-1} + β_rest rest + z'β_z + ε`
//! with one random slope ξ_i ~ N(0, Σ), or the lognormal reparameterization
//! in which the slope is `β1 exp(ζ_i)` with ζ_i ~ N(0, Σ).

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{rest_covariate, CovariateVector};
use crate::error::{Error, Result};
use crate::lmm::{self, LmmOptions, LmmProblem, Row};
use crate::optim::{self, BfgsOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GpmForm {
    LinearNormal,
    LinearLognormal,
}

impl fmt::Display for GpmForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpmForm::LinearNormal => "linear-normal",
            GpmForm::LinearLognormal => "linear-lognormal",
        })
    }
}

impl FromStr for GpmForm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-normal" | "normal" => Ok(GpmForm::LinearNormal),
            "linear-lognormal" | "lognormal" => Ok(GpmForm::LinearLognormal),
            other => Err(Error::invalid(format!("unknown path model form `{other}`"))),
        }
    }
}

/// Which covariates enter the path besides intercept and cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpmSpec {
    pub form: GpmForm,
    /// Previous cycle's degradation amount.
    pub lag: bool,
    /// exp(-1 / rest hours).
    pub rest: bool,
    pub covariates: Vec<String>,
}

impl Default for GpmSpec {
    fn default() -> Self {
        Self {
            form: GpmForm::LinearNormal,
            lag: true,
            rest: true,
            covariates: Vec::new(),
        }
    }
}

impl GpmSpec {
    pub fn coef_names(&self) -> Vec<String> {
        let mut n = vec!["(Intercept)".to_string(), "cycle".to_string()];
        if self.lag {
            n.push("prev_d".into());
        }
        if self.rest {
            n.push("rest".into());
        }
        n.extend(self.covariates.iter().cloned());
        n
    }

    /// Design row (1, c, [lag], [rest], z...).
    fn row(&self, cycle: u32, prev_d: f64, rest_cov: f64, z: &CovariateVector) -> Result<Vec<f64>> {
        let mut x = vec![1.0, cycle as f64];
        if self.lag {
            x.push(prev_d);
        }
        if self.rest {
            x.push(rest_cov);
        }
        for name in &self.covariates {
            x.push(z.get(name).ok_or_else(|| Error::invalid(format!("covariate {name} not found")))?);
        }
        Ok(x)
    }
}

/// One observed degradation amount with its covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpmObservation {
    pub unit_id: String,
    pub cycle: u32,
    pub d: f64,
    /// Degradation amount of the previous cycle (0 before the first).
    pub prev_d: f64,
    pub rest_hours: f64,
    pub covariates: CovariateVector,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpmFit {
    pub spec: GpmSpec,
    pub coef_names: Vec<String>,
    /// Fixed coefficients in `coef_names` order; the cycle entry is β1.
    pub beta: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Variance of the random slope parameter (ξ or ζ).
    pub sigma_random: f64,
    pub sigma2_eps: f64,
    /// Per-unit ξ̂_i (normal form) or ζ̂_i (lognormal form).
    pub blups: Vec<(String, f64)>,
    pub loglik: f64,
    pub converged: bool,
}

struct Grouped {
    ids: Vec<String>,
    /// Per unit: (design rows, responses).
    units: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

fn group(obs: &[GpmObservation], spec: &GpmSpec) -> Result<Grouped> {
    let mut ids: Vec<&str> = obs.iter().map(|o| o.unit_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InsufficientData("path model needs at least 2 units".into()));
    }
    let mut units = Vec::with_capacity(ids.len());
    for id in &ids {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for o in obs.iter().filter(|o| o.unit_id == *id) {
            if !o.d.is_finite() || !o.prev_d.is_finite() {
                return Err(Error::invalid(format!("non-finite degradation amount for unit {id}")));
            }
            xs.push(spec.row(o.cycle, o.prev_d, rest_covariate(o.rest_hours)?, &o.covariates)?);
            ys.push(o.d);
        }
        units.push((xs, ys));
    }
    Ok(Grouped {
        ids: ids.into_iter().map(String::from).collect(),
        units,
    })
}

/// Ordinary least squares; `None` when the design is rank deficient.
fn ols(g: &Grouped) -> Option<(DVector<f64>, f64, usize)> {
    let p = g.units[0].0.first().map_or(0, |r| r.len());
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    let mut n = 0;
    for (xs, ys) in &g.units {
        for (x, y) in xs.iter().zip(ys) {
            let xv = DVector::from_column_slice(x);
            xtx.ger(1.0, &xv, &xv, 1.0);
            xty.axpy(*y, &xv, 1.0);
            n += 1;
        }
    }
    let beta = xtx.cholesky()?.solve(&xty);
    let rss = g
        .units
        .iter()
        .flat_map(|(xs, ys)| xs.iter().zip(ys))
        .map(|(x, y)| (y - DVector::from_column_slice(x).dot(&beta)).powi(2))
        .sum();
    Some((beta, rss, n))
}

/// Fit the path model to observed degradation amounts.
pub fn fit_gpm(obs: &[GpmObservation], spec: &GpmSpec, opts: &LmmOptions) -> Result<GpmFit> {
    let g = group(obs, spec)?;
    let names = spec.coef_names();
    // exact linear paths: no residual or random-slope variation left to estimate
    if let Some((beta, rss, _)) = ols(&g) {
        let yy: f64 = g.units.iter().flat_map(|u| u.1.iter()).map(|y| y * y).sum();
        if rss <= 1e-24 * yy.max(1e-300) {
            return Ok(GpmFit {
                spec: spec.clone(),
                coef_names: names.clone(),
                beta: beta.iter().copied().collect(),
                std_errors: vec![0.0; names.len()],
                sigma_random: 0.0,
                sigma2_eps: 0.0,
                blups: g.ids.iter().map(|id| (id.clone(), 0.0)).collect(),
                loglik: f64::INFINITY,
                converged: true,
            });
        }
    }
    let normal = fit_normal(&g, spec, opts)?;
    match spec.form {
        GpmForm::LinearNormal => Ok(normal),
        GpmForm::LinearLognormal => fit_lognormal(&g, spec, &normal, &opts.optimizer),
    }
}

fn fit_normal(g: &Grouped, spec: &GpmSpec, opts: &LmmOptions) -> Result<GpmFit> {
    let names = spec.coef_names();
    let mut problem = LmmProblem::new(1, names.clone(), vec!["cycle".into()]);
    for (id, (xs, ys)) in g.ids.iter().zip(&g.units) {
        let ys1: Vec<[f64; 1]> = ys.iter().map(|y| [*y]).collect();
        problem.add_group(
            id,
            xs.iter().zip(&ys1).map(|(x, y)| Row { y, x, e: &x[1..2] }),
        )?;
    }
    let fit = lmm::fit(&problem, opts)?;
    Ok(GpmFit {
        spec: spec.clone(),
        coef_names: names,
        std_errors: fit.std_errors(),
        beta: fit.beta.clone(),
        sigma_random: fit.g[(0, 0)],
        sigma2_eps: fit.sigma[(0, 0)],
        blups: fit.blups.iter().map(|(id, b)| (id.clone(), b[0])).collect(),
        loglik: fit.loglik,
        converged: fit.converged,
    })
}

/// Negative Laplace log-likelihood contribution of one unit and its conditional mode.
///
/// Curvature uses the Gauss-Newton term only, which keeps it positive.
fn unit_laplace(xs: &[Vec<f64>], ys: &[f64], beta: &[f64], s2: f64, s2z: f64, zeta0: f64) -> (f64, f64) {
    let b1 = beta[1];
    let base: Vec<f64> = xs
        .iter()
        .map(|x| x.iter().zip(beta).enumerate().filter(|(j, _)| *j != 1).map(|(_, (a, b))| a * b).sum())
        .collect();
    let h = |z: f64| -> f64 {
        let s = b1 * z.exp();
        let rss: f64 = xs.iter().zip(ys).zip(&base).map(|((x, y), b)| (y - b - s * x[1]).powi(2)).sum();
        rss / (2.0 * s2) + z * z / (2.0 * s2z)
    };
    let derivs = |z: f64| -> (f64, f64) {
        let s = b1 * z.exp();
        let mut g = z / s2z;
        let mut hh = 1.0 / s2z;
        for ((x, y), b) in xs.iter().zip(ys).zip(&base) {
            let dm = s * x[1];
            let r = y - b - dm;
            g -= r * dm / s2;
            hh += dm * dm / s2;
        }
        (g, hh)
    };
    let mut z = zeta0;
    let mut hz = h(z);
    for _ in 0..100 {
        let (g, hh) = derivs(z);
        let mut step = g / hh;
        let mut accepted = false;
        for _ in 0..40 {
            let cand = z - step;
            let hc = h(cand);
            if hc.is_finite() && hc <= hz {
                let moved = (cand - z).abs();
                z = cand;
                hz = hc;
                accepted = moved > 1e-12 * (1.0 + z.abs());
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    let (_, hh) = derivs(z);
    let n = ys.len() as f64;
    let nll = hz + 0.5 * n * (2.0 * PI * s2).ln() + 0.5 * (2.0 * PI * s2z).ln() + 0.5 * hh.ln() - 0.5 * (2.0 * PI).ln();
    (nll, z)
}

fn fit_lognormal(g: &Grouped, spec: &GpmSpec, normal: &GpmFit, bfgs: &BfgsOptions) -> Result<GpmFit> {
    let p = normal.beta.len();
    let b1 = normal.beta[1];
    if b1 == 0.0 {
        return Err(Error::invalid("lognormal path needs a non-zero mean slope"));
    }
    // ξ ≈ β1 ζ for small ζ
    let s2z0 = (normal.sigma_random / (b1 * b1)).max(1e-8);
    let mut x0 = normal.beta.clone();
    x0.push(normal.sigma2_eps.max(1e-300).ln() * 0.5);
    x0.push(s2z0.ln() * 0.5);
    let nll = |th: &[f64]| -> f64 {
        let beta = &th[..p];
        let s2 = (2.0 * th[p]).exp();
        let s2z = (2.0 * th[p + 1]).exp();
        if !(s2 > 0.0 && s2z > 0.0 && s2.is_finite() && s2z.is_finite()) {
            return f64::INFINITY;
        }
        g.units
            .iter()
            .map(|(xs, ys)| unit_laplace(xs, ys, beta, s2, s2z, 0.0).0)
            .sum()
    };
    let res = optim::minimize(nll, &x0, bfgs);
    let th = res.x;
    let beta = th[..p].to_vec();
    let s2 = (2.0 * th[p]).exp();
    let s2z = (2.0 * th[p + 1]).exp();
    let blups = g
        .ids
        .iter()
        .zip(&g.units)
        .map(|(id, (xs, ys))| (id.clone(), unit_laplace(xs, ys, &beta, s2, s2z, 0.0).1))
        .collect();
    Ok(GpmFit {
        spec: spec.clone(),
        coef_names: normal.coef_names.clone(),
        std_errors: vec![f64::NAN; p],
        beta,
        sigma_random: s2z,
        sigma2_eps: s2,
        blups,
        loglik: -res.f,
        converged: res.termination.is_converged(),
    })
}

impl GpmFit {
    pub fn unit_effect(&self, unit_id: &str) -> Option<f64> {
        self.blups.iter().find(|b| b.0 == unit_id).map(|b| b.1)
    }

    /// Path value at one cycle.
    pub fn predict_one(
        &self,
        unit_id: &str,
        cycle: u32,
        prev_d: f64,
        rest_cov: f64,
        z: &CovariateVector,
        population: bool,
    ) -> Result<f64> {
        let x = self.spec.row(cycle, prev_d, rest_cov, z)?;
        let re = if population {
            0.0
        } else {
            self.unit_effect(unit_id)
                .ok_or_else(|| Error::UnknownUnit(unit_id.to_string()))?
        };
        let mut v: f64 = x.iter().zip(&self.beta).map(|(a, b)| a * b).sum();
        let c = cycle as f64;
        v += match self.spec.form {
            GpmForm::LinearNormal => re * c,
            GpmForm::LinearLognormal => self.beta[1] * (re.exp() - 1.0) * c,
        };
        Ok(v)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// One future cycle of the path model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpmFuture {
    pub cycle: u32,
    pub rest_hours: f64,
    pub covariates: CovariateVector,
}

/// Recursive prediction: the first lag is the last observed amount
/// (`last_observed` = None before any observation), later lags are the
/// model's own predictions.
pub fn predict_gpm(
    fit: &GpmFit,
    unit_id: &str,
    last_observed: Option<(u32, f64)>,
    horizon: &[GpmFuture],
    population: bool,
) -> Result<Vec<f64>> {
    let next = last_observed.map_or(1, |(c, _)| c + 1);
    for (k, h) in horizon.iter().enumerate() {
        if h.cycle != next + k as u32 {
            return Err(Error::invalid(format!(
                "horizon cycle {} breaks contiguity (expected {})",
                h.cycle,
                next + k as u32
            )));
        }
    }
    let mut lag = last_observed.map_or(0.0, |(_, d)| d);
    let mut out = Vec::with_capacity(horizon.len());
    for h in horizon {
        let d = fit.predict_one(unit_id, h.cycle, lag, rest_covariate(h.rest_hours)?, &h.covariates, population)?;
        out.push(d);
        lag = d;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(unit: &str, cycle: u32, d: f64, prev: f64, z: f64) -> GpmObservation {
        GpmObservation {
            unit_id: unit.into(),
            cycle,
            d,
            prev_d: prev,
            rest_hours: if cycle.is_multiple_of(3) { 10.0 } else { 1.0 },
            covariates: CovariateVector::new().with("z", z),
        }
    }

    #[test]
    fn noiseless_linear_paths() {
        let spec = GpmSpec {
            lag: false,
            rest: false,
            ..Default::default()
        };
        let data: Vec<GpmObservation> = ["a", "b", "c"]
            .iter()
            .flat_map(|u| (1..=10).map(move |c| obs(u, c, 0.001 * c as f64, 0.0, 0.0)))
            .collect();
        let fit = fit_gpm(&data, &spec, &LmmOptions::default()).unwrap();
        assert!((fit.beta[1] - 0.001).abs() < 1e-12);
        assert!(fit.beta[0].abs() < 1e-12);
        assert!(fit.sigma_random.abs() < 1e-8);
        let lfit = fit_gpm(&data, &GpmSpec { form: GpmForm::LinearLognormal, ..spec }, &LmmOptions::default()).unwrap();
        assert_eq!(lfit.sigma_random, 0.0);
    }

    fn noisy() -> Vec<GpmObservation> {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut out = Vec::new();
        for u in 0..12 {
            let id = format!("u{u:02}");
            let z: f64 = rng.random();
            let xi: f64 = 0.0005 * rng.sample::<f64, _>(StandardNormal);
            let mut prev = 0.0;
            for c in 1..=30u32 {
                let rest = if c % 3 == 0 { (-0.1f64).exp() } else { (-1.0f64).exp() };
                let d = 0.002 + (0.004 + xi) * c as f64 + 0.2 * prev - 0.01 * rest + 0.01 * z
                    + 0.002 * rng.sample::<f64, _>(StandardNormal);
                out.push(obs(&id, c, d, prev, z));
                prev = d;
            }
        }
        out
    }

    #[test]
    fn normal_form_recovers_coefficients() {
        let spec = GpmSpec {
            covariates: vec!["z".into()],
            ..Default::default()
        };
        let fit = fit_gpm(&noisy(), &spec, &LmmOptions::default()).unwrap();
        assert_eq!(fit.coef_names, ["(Intercept)", "cycle", "prev_d", "rest", "z"]);
        let truth = [0.002, 0.004, 0.2, -0.01, 0.01];
        for ((b, t), se) in fit.beta.iter().zip(truth).zip(&fit.std_errors) {
            assert!((b - t).abs() < 4.0 * se, "{b} vs {t} (se {se})");
        }
    }

    #[test]
    fn lognormal_form_matches_normal_population_path() {
        let spec = GpmSpec {
            covariates: vec!["z".into()],
            ..Default::default()
        };
        let data = noisy();
        let n = fit_gpm(&data, &spec, &LmmOptions::default()).unwrap();
        let l = fit_gpm(&data, &GpmSpec { form: GpmForm::LinearLognormal, ..spec.clone() }, &LmmOptions::default()).unwrap();
        // slopes close, and ζ = 0 reproduces the fixed path exactly
        assert!((n.beta[1] - l.beta[1]).abs() < 0.1 * n.beta[1].abs());
        let z = CovariateVector::new().with("z", 0.5);
        let mut zero = l.clone();
        zero.blups.iter_mut().for_each(|b| b.1 = 0.0);
        let a = zero.predict_one("u00", 7, 0.02, 0.3, &z, false).unwrap();
        let b = l.predict_one("u00", 7, 0.02, 0.3, &z, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recursion_oracle() {
        let spec = GpmSpec {
            covariates: vec!["z".into()],
            ..Default::default()
        };
        let fit = fit_gpm(&noisy(), &spec, &LmmOptions::default()).unwrap();
        let z = CovariateVector::new().with("z", 0.3);
        let horizon: Vec<GpmFuture> = (31..=35)
            .map(|c| GpmFuture {
                cycle: c,
                rest_hours: 5.0,
                covariates: z.clone(),
            })
            .collect();
        let path = predict_gpm(&fit, "u03", Some((30, 0.15)), &horizon, false).unwrap();
        let xi = fit.unit_effect("u03").unwrap();
        let b = &fit.beta;
        let mut lag = 0.15;
        for (k, c) in (31..=35).enumerate() {
            let expect = b[0] + (b[1] + xi) * c as f64 + b[2] * lag + b[3] * (-1.0f64 / 5.0).exp() + b[4] * 0.3;
            assert!((path[k] - expect).abs() < 1e-10);
            lag = path[k];
        }
        assert!(predict_gpm(&fit, "u03", Some((29, 0.1)), &horizon, false).is_err());
        assert!(matches!(predict_gpm(&fit, "zz", Some((30, 0.1)), &horizon, false), Err(Error::UnknownUnit(_))));
    }

    #[test]
    fn relabeling_units_does_not_change_the_fit() {
        let spec = GpmSpec::default();
        let data = noisy();
        let relabeled: Vec<GpmObservation> = data
            .iter()
            .map(|o| GpmObservation {
                unit_id: format!("x{}", 99 - o.unit_id[1..].parse::<u32>().unwrap()),
                ..o.clone()
            })
            .collect();
        let a = fit_gpm(&data, &spec, &LmmOptions::default()).unwrap();
        let b = fit_gpm(&relabeled, &spec, &LmmOptions::default()).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()));
        }
    }
}
