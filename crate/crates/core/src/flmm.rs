//! Functional linear mixed model for EOD times.
//!
//! `b_ic = g'α + h'w_i + ∫ (β(t) + b_i(t)) x_ic(t) dt + ε_ic` with β and b_i
//! in cubic B-spline bases, w_i ~ N(0, σ²Ψ), spline coefficients of b_i
//! ~ N(0, σ²D) and ε ~ N(0, σ²). The fixed slope and the random functions
//! carry second-derivative roughness penalties. Estimation alternates an
//! exact penalized least-squares step for all coefficients with an EM update
//! of (σ², Ψ, D); smoothing parameters come from cross-validation.

use std::sync::OnceLock;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::BSplineBasis;
use crate::data::{rest_covariate, CovariateVector, CycleRecord};
use crate::eod::{starting_lag, EodFormula, FutureCycle};
use crate::error::{Error, Result};
use crate::grid;
use crate::linalg::symmetrize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CvSplit {
    /// Hold out cycles within every unit.
    Cycles,
    /// Hold out whole units (predicted at population level).
    Units,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    Fixed { lambda_beta: f64, lambda_b: f64 },
    CrossValidate {
        /// Candidate values, shared by both smoothing parameters.
        grid: Vec<f64>,
        folds: usize,
        split: CvSplit,
        seed: u64,
    },
}

impl Smoothing {
    /// Seven log-spaced values from 1e-4 to 1e2, five folds over cycles.
    pub fn default_cv() -> Self {
        Smoothing::CrossValidate {
            grid: (0..7).map(|k| 10f64.powi(k - 4)).collect(),
            folds: 5,
            split: CvSplit::Cycles,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlmmOptions {
    pub beta_basis_size: usize,
    pub b_basis_size: usize,
    pub degree: usize,
    pub smoothing: Smoothing,
    pub max_iter: usize,
    /// Relative parameter change for convergence.
    pub tol: f64,
    /// Looser limits used for the cross-validation fits.
    pub cv_max_iter: usize,
    pub cv_tol: f64,
}

impl Default for FlmmOptions {
    fn default() -> Self {
        Self {
            beta_basis_size: 10,
            b_basis_size: 10,
            degree: 3,
            smoothing: Smoothing::default_cv(),
            max_iter: 200,
            tol: 1e-6,
            cv_max_iter: 30,
            cv_tol: 1e-4,
        }
    }
}

/// Variance components: residual variance and the two scaled covariances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    pub sigma2_eps: f64,
    pub psi: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl VarianceComponents {
    fn initial(sigma2: f64, r: usize, s: usize) -> Self {
        Self {
            sigma2_eps: sigma2,
            psi: DMatrix::identity(r, r) * 0.1,
            d: DMatrix::identity(s, s) * 0.1,
        }
    }
}

/// Penalized objective before and after one coefficient update, both at the
/// variance components of that iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmStep {
    pub iteration: usize,
    pub objective_before: f64,
    pub objective_after: f64,
    pub sigma2_eps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub grid: Vec<f64>,
    pub folds: usize,
    pub split: CvSplit,
    /// errors[a][b]: summed held-out squared error for (grid[a], grid[b]) = (λ_β, λ_b).
    pub errors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitFunctionalEffects {
    pub unit_id: String,
    /// Scalar random effects.
    pub w: Vec<f64>,
    /// Spline coefficients of the unit's random function.
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlmmEodFit {
    pub formula: EodFormula,
    pub coef_names: Vec<String>,
    pub alpha: Vec<f64>,
    pub std_errors: Vec<f64>,
    /// Spline coefficients of β.
    pub p: Vec<f64>,
    pub psi: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub sigma2_eps: f64,
    pub lambda_beta: f64,
    pub lambda_b: f64,
    pub basis_beta: BSplineBasis,
    pub basis_b: BSplineBasis,
    pub grid_size: usize,
    pub blups: Vec<UnitFunctionalEffects>,
    pub em_trace: Vec<EmStep>,
    pub iterations: usize,
    pub converged: bool,
    /// Every coefficient update lowered (or kept) the penalized objective.
    pub monotone: bool,
    pub cv: Option<CvReport>,
    #[serde(skip)]
    integrators: OnceLock<(DMatrix<f64>, DMatrix<f64>)>,
}

/// Per-unit sufficient statistics of the stacked designs G̃ = (g, j), H̃ = (h, k).
#[derive(Debug, Clone)]
struct Block {
    n: f64,
    gg: DMatrix<f64>,
    gh: DMatrix<f64>,
    hh: DMatrix<f64>,
    gy: DVector<f64>,
    hy: DVector<f64>,
    yy: f64,
}

#[derive(Debug, Clone)]
struct FRow {
    y: f64,
    gt: DVector<f64>,
    ht: DVector<f64>,
}

fn block<'a>(rows: impl Iterator<Item = &'a FRow>, m: usize, s: usize) -> Block {
    let mut b = Block {
        n: 0.0,
        gg: DMatrix::zeros(m, m),
        gh: DMatrix::zeros(m, s),
        hh: DMatrix::zeros(s, s),
        gy: DVector::zeros(m),
        hy: DVector::zeros(s),
        yy: 0.0,
    };
    for r in rows {
        b.n += 1.0;
        b.gg.ger(1.0, &r.gt, &r.gt, 1.0);
        b.gh.ger(1.0, &r.gt, &r.ht, 1.0);
        b.hh.ger(1.0, &r.ht, &r.ht, 1.0);
        b.gy.axpy(r.y, &r.gt, 1.0);
        b.hy.axpy(r.y, &r.ht, 1.0);
        b.yy += r.y * r.y;
    }
    b
}

/// Integration weights turning a curve on the grid into ∫ x B_j for every basis function.
fn integrator(basis: &BSplineBasis, grid_size: usize) -> DMatrix<f64> {
    let phi = basis.grid_matrix(grid_size);
    let w = grid::trapezoid_weights(grid_size);
    let mut out = phi.transpose();
    for (g, wg) in w.iter().enumerate() {
        out.column_mut(g).scale_mut(*wg);
    }
    out
}

struct Problem {
    q: usize,
    r: usize,
    gphi: DMatrix<f64>,
    gpsi: DMatrix<f64>,
}

impl Problem {
    fn m(&self) -> usize {
        self.q + self.gphi.nrows()
    }
    fn s(&self) -> usize {
        self.r + self.gpsi.nrows()
    }
}

/// Unit-level inverse covariance of (w, q) relative to σ², with the roughness penalty on q.
fn omega(p: &Problem, vc: &VarianceComponents, lambda_b: f64) -> Result<DMatrix<f64>> {
    let s = p.s();
    let mut o = DMatrix::zeros(s, s);
    if p.r > 0 {
        o.view_mut((0, 0), (p.r, p.r)).copy_from(&stable_inverse(&vc.psi)?);
    }
    let dq = stable_inverse(&vc.d)? + &p.gpsi * (vc.sigma2_eps * lambda_b);
    o.view_mut((p.r, p.r), (s - p.r, s - p.r)).copy_from(&dq);
    Ok(o)
}

fn penalty(p: &Problem, sigma2: f64, lambda_beta: f64) -> DMatrix<f64> {
    let m = p.m();
    let mut pen = DMatrix::zeros(m, m);
    let rr = m - p.q;
    pen.view_mut((p.q, p.q), (rr, rr)).copy_from(&(&p.gphi * (sigma2 * lambda_beta)));
    pen
}

/// Inverse of an SPD matrix, with a growing ridge when it is numerically singular.
fn stable_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c.inverse());
    }
    let scale = m.diagonal().abs().max().max(1e-300);
    for k in [1e-12, 1e-10, 1e-8, 1e-6] {
        let r = m + DMatrix::identity(m.nrows(), m.nrows()) * (k * scale);
        if let Some(c) = Cholesky::new(r) {
            return Ok(c.inverse());
        }
    }
    Err(Error::SingularSystem("variance component is not positive definite".into()))
}

fn rss(b: &Block, theta: &DVector<f64>, v: &DVector<f64>) -> f64 {
    b.yy - 2.0 * theta.dot(&b.gy) - 2.0 * v.dot(&b.hy)
        + theta.dot(&(&b.gg * theta))
        + 2.0 * theta.dot(&(&b.gh * v))
        + v.dot(&(&b.hh * v))
}

/// Penalized criterion scaled by 1 / (2σ²).
fn objective(
    blocks: &[Block],
    weights: &[f64],
    theta: &DVector<f64>,
    effects: &[DVector<f64>],
    omega: &DMatrix<f64>,
    pen: &DMatrix<f64>,
    sigma2: f64,
) -> f64 {
    let mut j = theta.dot(&(pen * theta));
    for ((b, w), v) in blocks.iter().zip(weights).zip(effects) {
        j += w * (rss(b, theta, v) + v.dot(&(omega * v)));
    }
    j / (2.0 * sigma2)
}

struct MStep {
    theta: DVector<f64>,
    effects: Vec<DVector<f64>>,
    chols: Vec<Cholesky<f64, Dyn>>,
    a_chol: Cholesky<f64, Dyn>,
}

/// Joint minimizer of the penalized criterion over (θ, all unit effects) at fixed variance components.
fn m_step(blocks: &[Block], weights: &[f64], omega: &DMatrix<f64>, pen: &DMatrix<f64>) -> Result<MStep> {
    let mut a = pen.clone();
    let mut rhs = DVector::zeros(pen.nrows());
    let mut parts = Vec::with_capacity(blocks.len());
    for (b, &w) in blocks.iter().zip(weights) {
        let ch = Cholesky::new(&b.hh + omega)
            .ok_or_else(|| Error::SingularSystem("unit-level system".into()))?;
        let chg = ch.solve(&b.gh.transpose());
        let chy = ch.solve(&b.hy);
        if w > 0.0 {
            a += (&b.gg - &b.gh * &chg) * w;
            rhs += (&b.gy - &b.gh * &chy) * w;
        }
        parts.push((ch, chg, chy));
    }
    symmetrize(&mut a);
    let a_chol = Cholesky::new(a).ok_or_else(|| Error::SingularSystem("penalized normal equations".into()))?;
    let theta = a_chol.solve(&rhs);
    let mut effects = Vec::with_capacity(blocks.len());
    let mut chols = Vec::with_capacity(blocks.len());
    for (ch, chg, chy) in parts {
        effects.push(chy - chg * &theta);
        chols.push(ch);
    }
    Ok(MStep {
        theta,
        effects,
        chols,
        a_chol,
    })
}

fn rel_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let d = (new - old).norm();
    d / old.norm().max(1e-8)
}

struct EmResult {
    vc: VarianceComponents,
    theta: DVector<f64>,
    effects: Vec<DVector<f64>>,
    cov_theta: DMatrix<f64>,
    trace: Vec<EmStep>,
    iterations: usize,
    converged: bool,
    monotone: bool,
}

/// Starting values: ridge least squares for θ and its residual variance.
fn initial_state(p: &Problem, blocks: &[Block], weights: &[f64]) -> Result<(VarianceComponents, DVector<f64>)> {
    let m = p.m();
    let mut a = DMatrix::zeros(m, m);
    let mut rhs = DVector::zeros(m);
    let mut n = 0.0;
    for (b, &w) in blocks.iter().zip(weights) {
        a += &b.gg * w;
        rhs += &b.gy * w;
        n += w * b.n;
    }
    let ridge = 1e-8 * a.trace().max(1e-300) / m as f64;
    let ch = Cholesky::new(&a + DMatrix::identity(m, m) * ridge)
        .ok_or_else(|| Error::SingularSystem("initial least squares".into()))?;
    let theta = ch.solve(&rhs);
    let zero = DVector::zeros(p.s());
    let res: f64 = blocks
        .iter()
        .zip(weights)
        .map(|(b, w)| w * rss(b, &theta, &zero))
        .sum();
    let dof = (n - m as f64).max(1.0);
    let sigma2 = (res / dof).max(1e-12 * (1.0 + rhs.norm()));
    Ok((VarianceComponents::initial(sigma2, p.r, p.s() - p.r), theta))
}

#[allow(clippy::too_many_arguments)]
fn run_em(
    p: &Problem,
    blocks: &[Block],
    weights: &[f64],
    lambda: (f64, f64),
    start: Option<&VarianceComponents>,
    max_iter: usize,
    tol: f64,
) -> Result<EmResult> {
    let (init_vc, mut theta) = initial_state(p, blocks, weights)?;
    let mut vc = start.cloned().unwrap_or(init_vc);
    let s = p.s();
    let mut effects: Vec<DVector<f64>> = vec![DVector::zeros(s); blocks.len()];
    let wsum: f64 = weights.iter().sum();
    let nsum: f64 = blocks.iter().zip(weights).map(|(b, w)| w * b.n).sum();
    if wsum <= 0.0 || nsum <= 0.0 {
        return Err(Error::InsufficientData("no weighted observations".into()));
    }
    let mut trace = Vec::new();
    let mut converged = false;
    let mut monotone = true;
    let mut iterations = 0;
    for it in 1..=max_iter {
        iterations = it;
        let om = omega(p, &vc, lambda.1)?;
        let pen = penalty(p, vc.sigma2_eps, lambda.0);
        let before = objective(blocks, weights, &theta, &effects, &om, &pen, vc.sigma2_eps);
        let step = m_step(blocks, weights, &om, &pen)?;
        let after = objective(blocks, weights, &step.theta, &step.effects, &om, &pen, vc.sigma2_eps);
        if after > before + 1e-9 * before.abs().max(1.0) {
            monotone = false;
        }
        trace.push(EmStep {
            iteration: it,
            objective_before: before,
            objective_after: after,
            sigma2_eps: vc.sigma2_eps,
        });

        // expectation step for the variance components
        let mut sig_num = 0.0;
        let mut psi = DMatrix::zeros(p.r, p.r);
        let mut d = DMatrix::zeros(s - p.r, s - p.r);
        for (((b, &w), v), ch) in blocks.iter().zip(weights).zip(&step.effects).zip(&step.chols) {
            if w == 0.0 {
                continue;
            }
            let cinv = ch.inverse();
            sig_num += w * (rss(b, &step.theta, v) + vc.sigma2_eps * (&cinv * &b.hh).trace());
            let outer = v * v.transpose() / vc.sigma2_eps + cinv;
            psi += outer.view((0, 0), (p.r, p.r)) * w;
            d += outer.view((p.r, p.r), (s - p.r, s - p.r)) * w;
        }
        let mut new_vc = VarianceComponents {
            sigma2_eps: (sig_num / nsum).max(1e-300),
            psi: psi / wsum,
            d: d / wsum,
        };
        symmetrize(&mut new_vc.psi);
        symmetrize(&mut new_vc.d);

        let dtheta = (&step.theta - &theta).norm() / theta.norm().max(1e-8);
        let change = dtheta
            .max((new_vc.sigma2_eps - vc.sigma2_eps).abs() / vc.sigma2_eps)
            .max(rel_change(&new_vc.psi, &vc.psi))
            .max(rel_change(&new_vc.d, &vc.d));
        theta = step.theta;
        effects = step.effects;
        vc = new_vc;
        if change < tol {
            converged = true;
            break;
        }
    }
    // final coefficient update at the final variance components
    let om = omega(p, &vc, lambda.1)?;
    let pen = penalty(p, vc.sigma2_eps, lambda.0);
    let step = m_step(blocks, weights, &om, &pen)?;
    let cov_theta = step.a_chol.inverse() * vc.sigma2_eps;
    Ok(EmResult {
        vc,
        theta: step.theta,
        effects: step.effects,
        cov_theta,
        trace,
        iterations,
        converged,
        monotone,
    })
}

/// EOD training data with functional covariates, grouped by unit (sorted by id).
#[derive(Debug, Clone)]
pub struct FlmmEodData {
    formula: EodFormula,
    basis_beta: BSplineBasis,
    basis_b: BSplineBasis,
    grid_size: usize,
    units: Vec<(String, Vec<FRow>)>,
}

impl FlmmEodData {
    pub fn new(records: &[&CycleRecord], formula: &EodFormula, opts: &FlmmOptions) -> Result<Self> {
        formula.validate()?;
        let grid_size = records
            .first()
            .map(|r| r.scaled.values.len())
            .ok_or_else(|| Error::InsufficientData("no EOD observations".into()))?;
        let basis_beta = BSplineBasis::new(opts.beta_basis_size, opts.degree)?;
        let basis_b = BSplineBasis::new(opts.b_basis_size, opts.degree)?;
        let ib = integrator(&basis_beta, grid_size);
        let iw = integrator(&basis_b, grid_size);
        let mut ids: Vec<&str> = records.iter().map(|r| r.unit_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        let mut units = Vec::with_capacity(ids.len());
        for id in ids {
            let mut rows = Vec::new();
            for r in records.iter().filter(|r| r.unit_id == id) {
                grid::check_grid(grid_size, r.scaled.values.len())?;
                let (g, h) = formula.record_design(r)?;
                let x = DVector::from_column_slice(&r.scaled.values);
                rows.push(FRow {
                    y: r.eod,
                    gt: stack(&g, &(&ib * &x)),
                    ht: stack(&h, &(&iw * &x)),
                });
            }
            units.push((id.to_string(), rows));
        }
        Ok(Self {
            formula: formula.clone(),
            basis_beta,
            basis_b,
            grid_size,
            units,
        })
    }

    pub fn unit_ids(&self) -> Vec<String> {
        self.units.iter().map(|u| u.0.clone()).collect()
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    fn problem(&self) -> Problem {
        Problem {
            q: self.formula.fixed_names().len(),
            r: self.formula.random_names().len(),
            gphi: self.basis_beta.penalty(),
            gpsi: self.basis_b.penalty(),
        }
    }

    fn blocks(&self, p: &Problem, keep: impl Fn(usize, usize) -> bool) -> Vec<Block> {
        self.units
            .iter()
            .enumerate()
            .map(|(u, (_, rows))| {
                block(
                    rows.iter().enumerate().filter(|(k, _)| keep(u, *k)).map(|(_, r)| r),
                    p.m(),
                    p.s(),
                )
            })
            .collect()
    }

    pub fn fit(&self, opts: &FlmmOptions) -> Result<FlmmEodFit> {
        self.fit_weighted(&vec![1.0; self.n_units()], opts, None)
    }

    /// Weighted fit; `weights` are aligned with [`FlmmEodData::unit_ids`].
    /// A `start` fit supplies initial variance components for the final fit.
    pub fn fit_weighted(&self, weights: &[f64], opts: &FlmmOptions, start: Option<&FlmmEodFit>) -> Result<FlmmEodFit> {
        if weights.len() != self.n_units() {
            return Err(Error::invalid(format!(
                "{} weights for {} units",
                weights.len(),
                self.n_units()
            )));
        }
        let p = self.problem();
        let (lambda, cv) = match &opts.smoothing {
            Smoothing::Fixed { lambda_beta, lambda_b } => {
                if !(*lambda_beta >= 0.0 && *lambda_b >= 0.0) {
                    return Err(Error::invalid("smoothing parameters must be non-negative"));
                }
                ((*lambda_beta, *lambda_b), None)
            }
            Smoothing::CrossValidate {
                grid,
                folds,
                split,
                seed,
            } => {
                let report = self.cross_validate(&p, weights, grid, *folds, *split, *seed, opts)?;
                let mut best = (f64::INFINITY, 0, 0);
                for (a, row) in report.errors.iter().enumerate() {
                    for (b, e) in row.iter().enumerate() {
                        if *e < best.0 {
                            best = (*e, a, b);
                        }
                    }
                }
                if !best.0.is_finite() {
                    return Err(Error::SingularSystem("every cross-validation fit failed".into()));
                }
                ((grid[best.1], grid[best.2]), Some(report))
            }
        };
        let blocks = self.blocks(&p, |_, _| true);
        let em = run_em(
            &p,
            &blocks,
            weights,
            lambda,
            start.map(|f| f.variance_components()).as_ref(),
            opts.max_iter,
            opts.tol,
        )?;
        if !em.converged {
            log::info!("functional EOD model: EM stopped at the iteration cap ({})", em.iterations);
        }
        Ok(self.assemble(&p, em, lambda, cv))
    }

    #[allow(clippy::too_many_arguments)]
    fn cross_validate(
        &self,
        p: &Problem,
        weights: &[f64],
        lambdas: &[f64],
        folds: usize,
        split: CvSplit,
        seed: u64,
        opts: &FlmmOptions,
    ) -> Result<CvReport> {
        if lambdas.is_empty() || lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::invalid("smoothing grid must be non-empty and non-negative"));
        }
        if folds < 2 {
            return Err(Error::invalid("cross-validation needs at least 2 folds"));
        }
        let assignment = self.fold_assignment(folds, split, seed);
        let per_fold: Vec<Vec<Vec<f64>>> = (0..folds)
            .into_par_iter()
            .map(|f| {
                let train = self.blocks(p, |u, k| assignment[u][k] != f);
                let mut start: Option<VarianceComponents> = None;
                let mut errs = vec![vec![f64::INFINITY; lambdas.len()]; lambdas.len()];
                // serpentine order so every warm start comes from a neighbouring pair
                let n = lambdas.len();
                for a in 0..n {
                    for step in 0..n {
                        let b = if a % 2 == 0 { step } else { n - 1 - step };
                        let (lb, lw) = (lambdas[a], lambdas[b]);
                        let Ok(em) = run_em(p, &train, weights, (lb, lw), start.as_ref(), opts.cv_max_iter, opts.cv_tol)
                        else {
                            continue;
                        };
                        let mut e = 0.0;
                        for (u, (_, rows)) in self.units.iter().enumerate() {
                            for (k, r) in rows.iter().enumerate() {
                                if assignment[u][k] != f {
                                    continue;
                                }
                                let mut pred = r.gt.dot(&em.theta);
                                if split == CvSplit::Cycles {
                                    pred += r.ht.dot(&em.effects[u]);
                                }
                                e += weights[u] * (r.y - pred).powi(2);
                            }
                        }
                        errs[a][b] = e;
                        start = Some(em.vc);
                    }
                }
                errs
            })
            .collect();
        let mut errors = vec![vec![0.0; lambdas.len()]; lambdas.len()];
        for fe in per_fold {
            for (a, row) in fe.into_iter().enumerate() {
                for (b, e) in row.into_iter().enumerate() {
                    errors[a][b] += e;
                }
            }
        }
        Ok(CvReport {
            grid: lambdas.to_vec(),
            folds,
            split,
            errors,
        })
    }

    /// Fold index of every row.
    fn fold_assignment(&self, folds: usize, split: CvSplit, seed: u64) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match split {
            CvSplit::Cycles => self
                .units
                .iter()
                .map(|(_, rows)| {
                    let mut idx: Vec<usize> = (0..rows.len()).collect();
                    idx.shuffle(&mut rng);
                    let mut out = vec![0; rows.len()];
                    for (rank, k) in idx.into_iter().enumerate() {
                        out[k] = rank % folds;
                    }
                    out
                })
                .collect(),
            CvSplit::Units => {
                let mut idx: Vec<usize> = (0..self.units.len()).collect();
                idx.shuffle(&mut rng);
                let mut unit_fold = vec![0; self.units.len()];
                for (rank, u) in idx.into_iter().enumerate() {
                    unit_fold[u] = rank % folds;
                }
                self.units
                    .iter()
                    .zip(unit_fold)
                    .map(|((_, rows), f)| vec![f; rows.len()])
                    .collect()
            }
        }
    }

    fn assemble(&self, p: &Problem, em: EmResult, lambda: (f64, f64), cv: Option<CvReport>) -> FlmmEodFit {
        let q = p.q;
        let blups = self
            .units
            .iter()
            .zip(&em.effects)
            .map(|((id, _), v)| UnitFunctionalEffects {
                unit_id: id.clone(),
                w: v.rows(0, p.r).iter().copied().collect(),
                q: v.rows(p.r, v.len() - p.r).iter().copied().collect(),
            })
            .collect();
        FlmmEodFit {
            formula: self.formula.clone(),
            coef_names: self.formula.fixed_names(),
            alpha: em.theta.rows(0, q).iter().copied().collect(),
            std_errors: (0..q).map(|i| em.cov_theta[(i, i)].max(0.0).sqrt()).collect(),
            p: em.theta.rows(q, em.theta.len() - q).iter().copied().collect(),
            psi: em.vc.psi,
            d: em.vc.d,
            sigma2_eps: em.vc.sigma2_eps,
            lambda_beta: lambda.0,
            lambda_b: lambda.1,
            basis_beta: self.basis_beta.clone(),
            basis_b: self.basis_b.clone(),
            grid_size: self.grid_size,
            blups,
            em_trace: em.trace,
            iterations: em.iterations,
            converged: em.converged,
            monotone: em.monotone,
            cv,
            integrators: OnceLock::new(),
        }
    }
}

fn stack(a: &[f64], b: &DVector<f64>) -> DVector<f64> {
    DVector::from_iterator(a.len() + b.len(), a.iter().copied().chain(b.iter().copied()))
}

impl FlmmEodFit {
    pub fn variance_components(&self) -> VarianceComponents {
        VarianceComponents {
            sigma2_eps: self.sigma2_eps,
            psi: self.psi.clone(),
            d: self.d.clone(),
        }
    }

    pub fn unit_effects(&self, unit_id: &str) -> Option<&UnitFunctionalEffects> {
        self.blups.iter().find(|b| b.unit_id == unit_id)
    }

    fn integrators(&self) -> &(DMatrix<f64>, DMatrix<f64>) {
        self.integrators.get_or_init(|| {
            (
                integrator(&self.basis_beta, self.grid_size),
                integrator(&self.basis_b, self.grid_size),
            )
        })
    }

    /// Estimated slope function β̂ on the model's grid.
    pub fn beta_on_grid(&self) -> Vec<f64> {
        self.basis_beta.function_on_grid(&self.p, self.grid_size)
    }

    /// A unit's random function b̂_i on the model's grid.
    pub fn unit_function_on_grid(&self, unit_id: &str) -> Option<Vec<f64>> {
        self.unit_effects(unit_id)
            .map(|u| self.basis_b.function_on_grid(&u.q, self.grid_size))
    }

    /// Linear predictor for one cycle whose scaled curve is `curve`.
    #[allow(clippy::too_many_arguments)]
    pub fn predict_one(
        &self,
        unit_id: &str,
        cycle: u32,
        prev_eod: f64,
        rest_cov: f64,
        z: &CovariateVector,
        curve: &[f64],
        population: bool,
    ) -> Result<f64> {
        grid::check_grid(self.grid_size, curve.len())?;
        let (g, h) = self.formula.design(cycle, prev_eod, rest_cov, z)?;
        let x = DVector::from_column_slice(curve);
        let (ib, iw) = self.integrators();
        let mut v: f64 = g.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
        v += (ib * &x).dot(&DVector::from_column_slice(&self.p));
        if !population {
            let u = self
                .unit_effects(unit_id)
                .ok_or_else(|| Error::UnknownUnit(unit_id.to_string()))?;
            v += h.iter().zip(&u.w).map(|(a, b)| a * b).sum::<f64>();
            v += (iw * &x).dot(&DVector::from_column_slice(&u.q));
        }
        Ok(v)
    }

    /// Fitted EODs of observed cycles (observed lags and curves, unit BLUPs).
    pub fn fitted(&self, records: &[&CycleRecord]) -> Result<Vec<f64>> {
        records
            .iter()
            .map(|r| {
                self.predict_one(
                    &r.unit_id,
                    r.cycle,
                    r.prev_eod,
                    r.rest_covariate(),
                    &r.covariates,
                    &r.scaled.values,
                    false,
                )
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn fit_flmm_eod(records: &[&CycleRecord], formula: &EodFormula, opts: &FlmmOptions) -> Result<FlmmEodFit> {
    FlmmEodData::new(records, formula, opts)?.fit(opts)
}

/// Recursive multi-step prediction with the functional model; `curves[k]` is
/// the (predicted) scaled curve of horizon cycle k.
pub fn predict_flmm_path(
    fit: &FlmmEodFit,
    unit_id: &str,
    history: &[&CycleRecord],
    horizon: &[FutureCycle],
    curves: &[Vec<f64>],
    population: bool,
) -> Result<Vec<f64>> {
    if curves.len() != horizon.len() {
        return Err(Error::invalid(format!(
            "{} curves for {} horizon cycles",
            curves.len(),
            horizon.len()
        )));
    }
    let mut lag = starting_lag(history, horizon)?;
    let mut out = Vec::with_capacity(horizon.len());
    for (fc, x) in horizon.iter().zip(curves) {
        let rest = rest_covariate(fc.rest_hours)?;
        let b = fit.predict_one(unit_id, fc.cycle, lag, rest, &fc.covariates, x, population)?;
        out.push(b);
        lag = b;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{generate_dataset, EodKind, SimulationConfig};

    fn sim_records(n_units: usize, n_cycles: usize) -> Vec<CycleRecord> {
        let cfg = SimulationConfig {
            n_units,
            n_cycles,
            model: EodKind::Flmm,
            ..Default::default()
        };
        let sim = generate_dataset(&cfg, 3, 1).unwrap();
        sim.dataset.units.into_iter().flat_map(|u| u.cycles).collect()
    }

    fn fixed(lb: f64, lw: f64) -> FlmmOptions {
        FlmmOptions {
            smoothing: Smoothing::Fixed {
                lambda_beta: lb,
                lambda_b: lw,
            },
            ..Default::default()
        }
    }

    #[test]
    fn coefficient_step_matches_dense_penalized_least_squares() {
        let recs = sim_records(4, 12);
        let refs: Vec<&CycleRecord> = recs.iter().collect();
        let opts = FlmmOptions {
            beta_basis_size: 6,
            b_basis_size: 5,
            ..fixed(0.3, 0.7)
        };
        let data = FlmmEodData::new(&refs, &EodFormula::simulation_flmm(), &opts).unwrap();
        let p = data.problem();
        let blocks = data.blocks(&p, |_, _| true);
        let vc = VarianceComponents {
            sigma2_eps: 0.02,
            psi: DMatrix::from_row_slice(2, 2, &[2.0, 0.1, 0.1, 0.5]),
            d: DMatrix::identity(5, 5) * 0.3,
        };
        let om = omega(&p, &vc, 0.7).unwrap();
        let pen = penalty(&p, vc.sigma2_eps, 0.3);
        let step = m_step(&blocks, &[1.0; 4], &om, &pen).unwrap();

        // stack every observation and every unit's effects into one dense system
        let (m, s) = (p.m(), p.s());
        let dim = m + 4 * s;
        let mut lhs = DMatrix::<f64>::zeros(dim, dim);
        let mut rhs = DVector::<f64>::zeros(dim);
        lhs.view_mut((0, 0), (m, m)).copy_from(&pen);
        for (u, (_, rows)) in data.units.iter().enumerate() {
            let o = m + u * s;
            let mut ov = lhs.view_mut((o, o), (s, s));
            ov += &om;
            for r in rows {
                let mut full = DVector::<f64>::zeros(dim);
                full.rows_mut(0, m).copy_from(&r.gt);
                full.rows_mut(o, s).copy_from(&r.ht);
                lhs += &full * full.transpose();
                rhs += &full * r.y;
            }
        }
        let sol = lhs.lu().solve(&rhs).unwrap();
        for i in 0..m {
            assert!((sol[i] - step.theta[i]).abs() < 1e-8 * (1.0 + sol[i].abs()), "theta {i}");
        }
        for u in 0..4 {
            for k in 0..s {
                let a = sol[m + u * s + k];
                assert!((a - step.effects[u][k]).abs() < 1e-8 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn objective_never_increases() {
        let recs = sim_records(8, 25);
        let refs: Vec<&CycleRecord> = recs.iter().collect();
        let fit = fit_flmm_eod(&refs, &EodFormula::simulation_flmm(), &fixed(0.01, 0.01)).unwrap();
        assert!(fit.monotone);
        assert!(!fit.em_trace.is_empty());
        for s in &fit.em_trace {
            assert!(s.objective_after <= s.objective_before * (1.0 + 1e-12) + 1e-12, "{s:?}");
        }
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let recs = sim_records(6, 15);
        let refs: Vec<&CycleRecord> = recs.iter().collect();
        let opts = fixed(0.1, 1.0);
        let data = FlmmEodData::new(&refs, &EodFormula::simulation_flmm(), &opts).unwrap();
        let a = data.fit(&opts).unwrap();
        let b = data.fit_weighted(&[1.0; 6], &opts, None).unwrap();
        for (x, y) in a.alpha.iter().zip(&b.alpha).chain(a.p.iter().zip(&b.p)) {
            assert!((x - y).abs() < 1e-8 * (1.0 + x.abs()));
        }
        assert!((a.sigma2_eps - b.sigma2_eps).abs() < 1e-8 * a.sigma2_eps);
        assert!(data.fit_weighted(&[1.0; 5], &opts, None).is_err());
    }

    #[test]
    fn recursive_path_feeds_back_predictions() {
        let recs = sim_records(3, 10);
        let refs: Vec<&CycleRecord> = recs.iter().filter(|r| r.cycle <= 7).collect();
        let fit = fit_flmm_eod(&refs, &EodFormula::simulation_flmm(), &fixed(0.1, 0.1)).unwrap();
        let unit = recs[0].unit_id.clone();
        let history: Vec<&CycleRecord> = refs.iter().copied().filter(|r| r.unit_id == unit).collect();
        let future: Vec<&CycleRecord> = recs.iter().filter(|r| r.unit_id == unit && r.cycle > 7).collect();
        let horizon: Vec<FutureCycle> = future.iter().map(|r| FutureCycle::from(*r)).collect();
        let curves: Vec<Vec<f64>> = future.iter().map(|r| r.scaled.values.clone()).collect();
        let path = predict_flmm_path(&fit, &unit, &history, &horizon, &curves, false).unwrap();

        // oracle: explicit linear predictor with integrals of the spline functions
        let beta = fit.beta_on_grid();
        let bi = fit.unit_function_on_grid(&unit).unwrap();
        let w = &fit.unit_effects(&unit).unwrap().w;
        let mut lag = history.last().unwrap().eod;
        for (k, r) in future.iter().enumerate() {
            let rest = r.rest_covariate();
            let a = &fit.alpha;
            let f: Vec<f64> = r.scaled.values.iter().zip(beta.iter().zip(&bi)).map(|(x, (b, c))| x * (b + c)).collect();
            let expect = a[0] + a[1] * lag + a[2] * rest + w[0] + w[1] * lag + grid::integrate_unit(&f);
            assert!((path[k] - expect).abs() < 1e-10 * expect.abs().max(1.0), "{} {}", path[k], expect);
            lag = path[k];
        }
        assert!(predict_flmm_path(&fit, &unit, &history, &horizon, &curves[..1], false).is_err());
        assert!(matches!(
            predict_flmm_path(&fit, "nope", &[], &horizon[..0], &[], false),
            Ok(v) if v.is_empty()
        ));
    }

    #[test]
    fn fold_assignment_is_balanced_and_seeded() {
        let recs = sim_records(3, 11);
        let refs: Vec<&CycleRecord> = recs.iter().collect();
        let data = FlmmEodData::new(&refs, &EodFormula::simulation_flmm(), &FlmmOptions::default()).unwrap();
        let a = data.fold_assignment(5, CvSplit::Cycles, 9);
        assert_eq!(a, data.fold_assignment(5, CvSplit::Cycles, 9));
        for unit in &a {
            for f in 0..5 {
                let c = unit.iter().filter(|x| **x == f).count();
                assert!((2..=3).contains(&c));
            }
        }
        let u = data.fold_assignment(2, CvSplit::Units, 1);
        assert!(u.iter().all(|rows| rows.iter().all(|f| *f == rows[0])));
    }
}
