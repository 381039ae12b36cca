//! Grouped (multivariate) linear mixed-model engine shared by the score model,
//! the EOD model and the general path model.
//!
//! Each group (unit) contributes cycles c with a K-variate response y_c, a
//! fixed-effects row x_c (length q) and a random-effects row e_c (length r):
//!
//! ```text
//! y_c = B x_c + A_i e_c + δ_c,   vec(A_i) ~ N(0, G),   δ_c ~ N(0, Σ_δ)
//! ```
//!
//! with `B` (K × q) fixed and `A_i` (K × r) random. In stacked form the design
//! matrices are X_c = x_c' ⊗ I_K and Z_c = e_c' ⊗ I_K, and the residual
//! covariance of a group is Σ_δ ⊗ I. Every likelihood evaluation only touches
//! per-group sufficient statistics (Σ x x', Σ e x', Σ y x', ...), so its cost
//! does not depend on the number of cycles.
//!
//! Variance components are parameterized by log-Cholesky factors and the
//! restricted (or full) log-likelihood is maximized with BFGS.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, kron, vec_of};
use crate::optim::{self, BfgsOptions, Termination};

/// Likelihood used for variance-component estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Method {
    #[default]
    Reml,
    Ml,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmmOptions {
    pub method: Method,
    /// Restrict G to be diagonal.
    pub diagonal_random: bool,
    /// Restrict Σ_δ to be diagonal.
    pub diagonal_residual: bool,
    pub optimizer: BfgsOptions,
}

impl Default for LmmOptions {
    fn default() -> Self {
        Self {
            method: Method::Reml,
            diagonal_random: false,
            diagonal_residual: false,
            optimizer: BfgsOptions::default(),
        }
    }
}

/// Sufficient statistics of one group.
#[derive(Debug, Clone)]
pub struct GroupStats {
    pub id: String,
    pub n: usize,
    xx: DMatrix<f64>,
    ex: DMatrix<f64>,
    ee: DMatrix<f64>,
    yx: DMatrix<f64>,
    ye: DMatrix<f64>,
    yy: DMatrix<f64>,
}

/// One observation row: response (K), fixed row (q), random row (r).
pub struct Row<'a> {
    pub y: &'a [f64],
    pub x: &'a [f64],
    pub e: &'a [f64],
}

/// A grouped LMM data set, ready to fit.
#[derive(Debug, Clone)]
pub struct LmmProblem {
    pub k: usize,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    pub groups: Vec<GroupStats>,
}

impl LmmProblem {
    pub fn new(k: usize, fixed_names: Vec<String>, random_names: Vec<String>) -> Self {
        Self {
            k,
            fixed_names,
            random_names,
            groups: Vec::new(),
        }
    }

    pub fn q(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn r(&self) -> usize {
        self.random_names.len()
    }

    /// Add a group from its rows.
    pub fn add_group<'a>(&mut self, id: &str, rows: impl IntoIterator<Item = Row<'a>>) -> Result<()> {
        let (k, q, r) = (self.k, self.q(), self.r());
        let mut g = GroupStats {
            id: id.to_string(),
            n: 0,
            xx: DMatrix::zeros(q, q),
            ex: DMatrix::zeros(r, q),
            ee: DMatrix::zeros(r, r),
            yx: DMatrix::zeros(k, q),
            ye: DMatrix::zeros(k, r),
            yy: DMatrix::zeros(k, k),
        };
        for row in rows {
            if row.y.len() != k || row.x.len() != q || row.e.len() != r {
                return Err(Error::invalid(format!(
                    "group {id}: row dimensions ({}, {}, {}) do not match ({k}, {q}, {r})",
                    row.y.len(),
                    row.x.len(),
                    row.e.len()
                )));
            }
            if row.y.iter().chain(row.x).chain(row.e).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("group {id}: non-finite value")));
            }
            let y = DVector::from_column_slice(row.y);
            let x = DVector::from_column_slice(row.x);
            let e = DVector::from_column_slice(row.e);
            g.xx += &x * x.transpose();
            g.ex += &e * x.transpose();
            g.ee += &e * e.transpose();
            g.yx += &y * x.transpose();
            g.ye += &y * e.transpose();
            g.yy += &y * y.transpose();
            g.n += 1;
        }
        if g.n == 0 {
            return Err(Error::invalid(format!("group {id} has no rows")));
        }
        self.groups.push(g);
        Ok(())
    }

    /// Names of fixed-effect columns that are collinear in the pooled design.
    pub fn collinear_fixed(&self) -> Vec<String> {
        let q = self.q();
        let mut xx = DMatrix::zeros(q, q);
        for g in &self.groups {
            xx += &g.xx;
        }
        linalg::collinear_columns(&xx, 1e-10)
            .into_iter()
            .map(|j| self.fixed_names[j].clone())
            .collect()
    }
}

/// Per-group quantities at given variance components.
struct GroupTerms {
    xvx: DMatrix<f64>,
    xvy: DVector<f64>,
    yvy: f64,
    logdet: f64,
    /// Kept for the gradient: Z'R⁻¹Z, Z'R⁻¹X, Z'R⁻¹y and H = L M⁻¹ L'.
    zrz: DMatrix<f64>,
    zrx: DMatrix<f64>,
    zry: DVector<f64>,
    h: DMatrix<f64>,
}

struct Components {
    l: DMatrix<f64>,
    ls: DMatrix<f64>,
    g: DMatrix<f64>,
    sigma: DMatrix<f64>,
    s_inv: DMatrix<f64>,
    logdet_sigma: f64,
}

impl Components {
    fn from_theta(theta: &[f64], k: usize, r: usize, opts: &LmmOptions) -> Option<Self> {
        let dg = r * k;
        let ng = linalg::log_cholesky_len(dg, opts.diagonal_random);
        let l = linalg::log_cholesky_factor(&theta[..ng], dg, opts.diagonal_random);
        let ls = linalg::log_cholesky_factor(&theta[ng..], k, opts.diagonal_residual);
        let sigma = &ls * ls.transpose();
        let chol = Cholesky::new(sigma.clone())?;
        let logdet_sigma = linalg::chol_logdet(&chol);
        if !logdet_sigma.is_finite() {
            return None;
        }
        let s_inv = chol.inverse();
        let g = &l * l.transpose();
        Some(Self {
            l,
            ls,
            g,
            sigma,
            s_inv,
            logdet_sigma,
        })
    }
}

fn group_terms(gs: &GroupStats, c: &Components, keep: bool) -> Option<GroupTerms> {
    let s = &c.s_inv;
    let zrz = kron(&gs.ee, s);
    let zrx = kron(&gs.ex, s);
    let xrx = kron(&gs.xx, s);
    let xry = vec_of(&(s * &gs.yx));
    let zry = vec_of(&(s * &gs.ye));
    let yry = (s * &gs.yy).trace();

    let lt = c.l.transpose();
    let mut m = &lt * &zrz * &c.l;
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(m)?;
    let fx = &lt * &zrx;
    let fy = &lt * &zry;
    let mfx = chol.solve(&fx);
    let mfy = chol.solve(&fy);
    let h = if keep {
        &c.l * chol.solve(&lt)
    } else {
        DMatrix::zeros(0, 0)
    };
    Some(GroupTerms {
        xvx: xrx - fx.transpose() * &mfx,
        xvy: xry - fx.transpose() * &mfy,
        yvy: yry - fy.dot(&mfy),
        logdet: gs.n as f64 * c.logdet_sigma + linalg::chol_logdet(&chol),
        zrz,
        zrx,
        zry,
        h,
    })
}

/// Σ_{a,b} w[a,b] · block(a, b) of `m`, with K × K blocks.
fn block_sum(w: &DMatrix<f64>, m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(k, k);
    for a in 0..w.nrows() {
        for b in 0..w.ncols() {
            let wab = w[(a, b)];
            if wab != 0.0 {
                out += m.view((a * k, b * k), (k, k)) * wab;
            }
        }
    }
    out
}

/// Gradient of the objective with respect to G (rK × rK) and Σ_δ (K × K),
/// as symmetric matrices Γ with df = tr(Γ dG) + tr(Γ_Σ dΣ).
fn group_gradient(
    gs: &GroupStats,
    t: &GroupTerms,
    c: &Components,
    beta: &DVector<f64>,
    a_inv: Option<&DMatrix<f64>>,
    k: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let s = &c.s_inv;
    let q = gs.xx.nrows();
    let r = gs.ee.nrows();
    let zrz_h = &t.zrz * &t.h;
    let zvz = &t.zrz - &zrz_h * &t.zrz;
    let zvx = &t.zrx - &zrz_h * &t.zrx;
    let zrr = &t.zry - &t.zrx * beta;
    let zvr = &zrr - &zrz_h * &zrr;
    let mut gam_g = zvz - &zvr * zvr.transpose();

    // Σ_c of the K × K diagonal blocks of V⁻¹, V⁻¹ r r' V⁻¹ and V⁻¹ X A⁻¹ X' V⁻¹
    let bmat = DMatrix::from_column_slice(k, q, beta.as_slice());
    let rr = &gs.yy - &gs.yx * bmat.transpose() - &bmat * gs.yx.transpose() + &bmat * &gs.xx * bmat.transpose();
    let re = &gs.ye - &bmat * gs.ex.transpose();
    let u_vec = &t.h * &zrr;
    let u = DMatrix::from_column_slice(k, r, u_vec.as_slice());
    let wr = &rr - &re * u.transpose() - &u * re.transpose() + &u * &gs.ee * u.transpose();
    let v_blocks = s * gs.n as f64 - s * block_sum(&gs.ee, &t.h, k) * s;
    let mut gam_s = v_blocks - s * wr * s;

    if let Some(a_inv) = a_inv {
        gam_g -= &zvx * a_inv * zvx.transpose();
        let f = &t.h * &t.zrx;
        let aft = a_inv * f.transpose();
        let t1 = block_sum(&gs.xx, a_inv, k);
        // Σ_c X_c A⁻¹ F' Z_c' = Σ_{a∈x, b∈e} ex[b, a] · block(a, b) of A⁻¹F'
        let t2 = block_sum(&gs.ex.transpose(), &aft, k);
        let t3 = block_sum(&gs.ee, &(&f * &aft), k);
        gam_s -= s * (t1 - &t2 - t2.transpose() + t3) * s;
    }
    (gam_g, gam_s)
}

/// Gradient with respect to log-Cholesky parameters given df = tr(Γ d(L L')).
fn chain_log_cholesky(gam: &DMatrix<f64>, l: &DMatrix<f64>, diagonal: bool, out: &mut Vec<f64>) {
    let dim = l.nrows();
    let gl = gam * l * 2.0;
    if diagonal {
        out.extend((0..dim).map(|i| gl[(i, i)] * l[(i, i)]));
        return;
    }
    for i in 0..dim {
        for j in 0..=i {
            out.push(if i == j { gl[(i, i)] * l[(i, i)] } else { gl[(i, j)] });
        }
    }
}

struct Evaluation {
    value: f64,
    beta: DVector<f64>,
    a: DMatrix<f64>,
    grad: Option<Vec<f64>>,
}

/// Restricted (or full) -2 log-likelihood without the 2π constant, the GLS
/// solution and optionally the gradient in θ.
fn evaluate(
    problem: &LmmProblem,
    weights: &[f64],
    theta: &[f64],
    opts: &LmmOptions,
    want_grad: bool,
) -> Option<Evaluation> {
    let (k, r) = (problem.k, problem.r());
    let c = Components::from_theta(theta, k, r, opts)?;
    let p = problem.q() * k;
    let mut a = DMatrix::zeros(p, p);
    let mut b = DVector::zeros(p);
    let mut yvy = 0.0;
    let mut logdet = 0.0;
    let mut kept = Vec::new();
    for (idx, (gs, &w)) in problem.groups.iter().zip(weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let t = group_terms(gs, &c, want_grad)?;
        a += &t.xvx * w;
        b += &t.xvy * w;
        yvy += w * t.yvy;
        logdet += w * t.logdet;
        if want_grad {
            kept.push((idx, t));
        }
    }
    linalg::symmetrize(&mut a);
    let chol = Cholesky::new(a.clone())?;
    let beta = chol.solve(&b);
    let rss = yvy - b.dot(&beta);
    let mut value = logdet + rss;
    let reml = opts.method == Method::Reml;
    if reml {
        value += linalg::chol_logdet(&chol);
    }
    if !value.is_finite() {
        return None;
    }
    let grad = want_grad.then(|| {
        let a_inv = reml.then(|| chol.inverse());
        let mut gam_g = DMatrix::zeros(r * k, r * k);
        let mut gam_s = DMatrix::zeros(k, k);
        for (idx, t) in &kept {
            let w = weights[*idx];
            let (gg, gsig) = group_gradient(&problem.groups[*idx], t, &c, &beta, a_inv.as_ref(), k);
            gam_g += gg * w;
            gam_s += gsig * w;
        }
        linalg::symmetrize(&mut gam_g);
        linalg::symmetrize(&mut gam_s);
        let mut out = Vec::with_capacity(theta.len());
        chain_log_cholesky(&gam_g, &c.l, opts.diagonal_random, &mut out);
        chain_log_cholesky(&gam_s, &c.ls, opts.diagonal_residual, &mut out);
        out
    });
    Some(Evaluation { value, beta, a, grad })
}

fn objective(
    problem: &LmmProblem,
    weights: &[f64],
    theta: &[f64],
    opts: &LmmOptions,
) -> Option<(f64, DVector<f64>, DMatrix<f64>)> {
    evaluate(problem, weights, theta, opts, false).map(|e| (e.value, e.beta, e.a))
}

/// Result of fitting an [`LmmProblem`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmmFit {
    pub k: usize,
    pub fixed_names: Vec<String>,
    pub random_names: Vec<String>,
    /// vec(B): fixed effects, column-major over the K × q coefficient matrix.
    pub beta: Vec<f64>,
    /// Covariance of the fixed-effect estimates.
    pub beta_cov: DMatrix<f64>,
    /// Random-effect covariance (rK × rK), ordered as vec(A_i).
    pub g: DMatrix<f64>,
    /// Residual covariance (K × K).
    pub sigma: DMatrix<f64>,
    /// Per-group BLUPs of vec(A_i).
    pub blups: Vec<(String, Vec<f64>)>,
    pub loglik: f64,
    pub method: Method,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    /// Log-likelihood after every optimizer iteration.
    pub trace: Vec<f64>,
    /// Optimizer parameters at the optimum, usable as a warm start.
    pub theta: Vec<f64>,
    /// Final inverse-Hessian approximation of the optimizer (not serialized).
    #[serde(skip)]
    pub inv_hessian: Option<Vec<Vec<f64>>>,
}

impl LmmFit {
    /// Fixed-effect coefficient matrix B (K × q).
    pub fn coef_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.k, self.fixed_names.len(), &self.beta)
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.beta_cov.diagonal().iter().map(|v| v.max(0.0).sqrt()).collect()
    }

    pub fn blup(&self, id: &str) -> Option<&[f64]> {
        self.blups.iter().find(|(g, _)| g == id).map(|(_, b)| b.as_slice())
    }
}

/// Starting values from ordinary least squares and per-group residual moments.
pub fn initial_theta(problem: &LmmProblem, weights: &[f64], opts: &LmmOptions) -> Result<Vec<f64>> {
    let (k, q, r) = (problem.k, problem.q(), problem.r());
    let mut xx = DMatrix::zeros(q, q);
    let mut yx = DMatrix::zeros(k, q);
    for (g, &w) in problem.groups.iter().zip(weights) {
        xx += &g.xx * w;
        yx += &g.yx * w;
    }
    let xx_chol = Cholesky::new(xx).ok_or_else(|| Error::SingularDesign {
        columns: problem.collinear_fixed(),
    })?;
    // B = YX XX^{-1}
    let b = xx_chol.solve(&yx.transpose()).transpose();

    let mut within = DMatrix::zeros(k, k);
    let mut within_df = 0.0;
    let mut total = DMatrix::zeros(k, k);
    let mut total_n = 0.0;
    let mut coefs: Vec<(f64, DVector<f64>)> = Vec::new();
    for (g, &w) in problem.groups.iter().zip(weights) {
        // Σ r r', Σ r e' with r = y - B x
        let rr = &g.yy - &g.yx * b.transpose() - &b * g.yx.transpose() + &b * &g.xx * b.transpose();
        let re = &g.ye - &b * g.ex.transpose();
        total += &rr * w;
        total_n += w * g.n as f64;
        if g.n > r {
            if let Some(c) = Cholesky::new(g.ee.clone()) {
                let a = c.solve(&re.transpose()).transpose(); // K × r
                within += (&rr - &a * &g.ee * a.transpose()) * w;
                within_df += w * (g.n - r) as f64;
                coefs.push((w, vec_of(&a)));
            }
        }
    }
    let mut sigma0 = if within_df > 0.0 {
        within / within_df
    } else {
        total / total_n.max(1.0)
    };
    linalg::symmetrize(&mut sigma0);
    let floor = 1e-8 * sigma0.diagonal().max().max(1e-12);
    for i in 0..k {
        sigma0[(i, i)] = sigma0[(i, i)].max(floor);
    }

    let dg = r * k;
    let mut g0 = DMatrix::zeros(dg, dg);
    let wsum: f64 = coefs.iter().map(|(w, _)| w).sum();
    if coefs.len() >= 2 && wsum > 0.0 {
        let mean = coefs.iter().fold(DVector::zeros(dg), |acc, (w, a)| acc + a * *w) / wsum;
        for (w, a) in &coefs {
            let d = a - &mean;
            g0 += &d * d.transpose() * *w;
        }
        g0 /= wsum;
    }
    // keep G0 away from singularity relative to its own scale
    let gscale = g0.diagonal().max().max(1e-10 * sigma0.diagonal().max());
    for i in 0..dg {
        g0[(i, i)] = g0[(i, i)].max(1e-4 * gscale) + 1e-6 * gscale;
    }
    let mut theta = linalg::log_cholesky_params(&g0, opts.diagonal_random);
    theta.extend(linalg::log_cholesky_params(&sigma0, opts.diagonal_residual));
    Ok(theta)
}

/// Fit with unit weights.
pub fn fit(problem: &LmmProblem, opts: &LmmOptions) -> Result<LmmFit> {
    let w = vec![1.0; problem.groups.len()];
    fit_weighted(problem, &w, opts, None)
}

/// Fit with per-group weights multiplying each group's log-likelihood
/// contribution; `start` optionally warm-starts the optimizer from a previous
/// fit of the same model.
pub fn fit_weighted(
    problem: &LmmProblem,
    weights: &[f64],
    opts: &LmmOptions,
    start: Option<&LmmFit>,
) -> Result<LmmFit> {
    if weights.len() != problem.groups.len() {
        return Err(Error::invalid("one weight per group required"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid("weights must be finite and non-negative"));
    }
    if problem.groups.len() < 2 {
        return Err(Error::InsufficientData(
            "mixed model needs at least 2 units".into(),
        ));
    }
    let collinear = problem.collinear_fixed();
    if !collinear.is_empty() {
        return Err(Error::SingularDesign { columns: collinear });
    }
    if let Some(f) = exact_fit(problem, weights, opts.method)? {
        return Ok(f);
    }
    let (k, r) = (problem.k, problem.r());
    let n_theta = linalg::log_cholesky_len(r * k, opts.diagonal_random)
        + linalg::log_cholesky_len(k, opts.diagonal_residual);
    let start = start.filter(|s| s.theta.len() == n_theta);
    let theta0 = match start {
        Some(s) => s.theta.clone(),
        None => initial_theta(problem, weights, opts)?,
    };
    let fg = |th: &[f64], want_grad: bool| match evaluate(problem, weights, th, opts, want_grad) {
        Some(e) => (e.value, e.grad),
        None => (f64::INFINITY, None),
    };
    let h0 = start.and_then(|s| s.inv_hessian.as_deref());
    let res = optim::minimize_fg(fg, &theta0, h0, &opts.optimizer);
    let (val, beta, a) = objective(problem, weights, &res.x, opts).ok_or_else(|| {
        Error::invalid("likelihood evaluation failed at the optimizer solution")
    })?;
    let comps = Components::from_theta(&res.x, k, r, opts)
        .ok_or_else(|| Error::invalid("invalid variance components at optimum"))?;
    let beta_cov = linalg::spd_inverse(&a).ok_or_else(|| Error::SingularDesign {
        columns: problem.collinear_fixed(),
    })?;

    let blups = problem
        .groups
        .iter()
        .map(|gs| (gs.id.clone(), blup(gs, &comps, &beta).data.as_vec().clone()))
        .collect();

    let n_eff: f64 = problem
        .groups
        .iter()
        .zip(weights)
        .map(|(g, w)| w * (g.n * k) as f64)
        .sum();
    let p = (problem.q() * k) as f64;
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    let cst = match opts.method {
        Method::Reml => (n_eff - p) * ln2pi,
        Method::Ml => n_eff * ln2pi,
    };
    let to_loglik = |v: f64| -0.5 * (v + cst);
    Ok(LmmFit {
        k,
        fixed_names: problem.fixed_names.clone(),
        random_names: problem.random_names.clone(),
        beta: beta.data.as_vec().clone(),
        beta_cov,
        g: comps.g,
        sigma: comps.sigma,
        blups,
        loglik: to_loglik(val),
        method: opts.method,
        converged: res.termination.is_converged(),
        termination: res.termination,
        iterations: res.iterations,
        trace: res.trace.iter().map(|&v| to_loglik(v)).collect(),
        theta: res.x,
        inv_hessian: Some(res.inv_hessian),
    })
}

/// Least-squares fit with zero variance components when the fixed effects
/// reproduce the responses to within 1e-6 of their RMS. The likelihood has no interior
/// optimum in that case and the generic path would chase a singular Σ.
fn exact_fit(problem: &LmmProblem, weights: &[f64], method: Method) -> Result<Option<LmmFit>> {
    let (k, q, r) = (problem.k, problem.q(), problem.r());
    let mut xx = DMatrix::zeros(q, q);
    let mut yx = DMatrix::zeros(k, q);
    let mut yy = 0.0;
    for (g, &w) in problem.groups.iter().zip(weights) {
        xx += &g.xx * w;
        yx += &g.yx * w;
        yy += g.yy.trace() * w;
    }
    let Some(chol) = Cholesky::new(xx) else {
        return Ok(None);
    };
    let b = chol.solve(&yx.transpose()).transpose();
    let mut rss = 0.0;
    for (g, &w) in problem.groups.iter().zip(weights) {
        let rr = &g.yy - &g.yx * b.transpose() - &b * g.yx.transpose() + &b * &g.xx * b.transpose();
        rss += rr.trace() * w;
    }
    // sufficient-statistic residuals carry cancellation error of order ε·yy
    if rss > 1e-12 * yy.max(f64::MIN_POSITIVE) {
        return Ok(None);
    }
    let p = k * q;
    Ok(Some(LmmFit {
        k,
        fixed_names: problem.fixed_names.clone(),
        random_names: problem.random_names.clone(),
        beta: vec_of(&b).data.as_vec().clone(),
        beta_cov: DMatrix::zeros(p, p),
        g: DMatrix::zeros(r * k, r * k),
        sigma: DMatrix::zeros(k, k),
        blups: problem.groups.iter().map(|g| (g.id.clone(), vec![0.0; r * k])).collect(),
        loglik: 0.0,
        method,
        converged: true,
        termination: Termination::ExactFit,
        iterations: 0,
        trace: Vec::new(),
        theta: Vec::new(),
        inv_hessian: None,
    }))
}

/// Conditional mean of vec(A_i) given the data: G Z' V^{-1} (y - X β).
fn blup(gs: &GroupStats, c: &Components, beta: &DVector<f64>) -> DVector<f64> {
    let s = &c.s_inv;
    let zrz = kron(&gs.ee, s);
    let zrx = kron(&gs.ex, s);
    let zry = vec_of(&(s * &gs.ye));
    let zr = zry - zrx * beta;
    let lt = c.l.transpose();
    let mut m = &lt * &zrz * &c.l;
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    match Cholesky::new(m) {
        Some(ch) => &c.l * ch.solve(&(&lt * zr)),
        None => DVector::zeros(c.g.nrows()),
    }
}

/// BLUPs of every group under the given fit's variance components
/// (useful after manually altering `g`).
pub fn recompute_blups(problem: &LmmProblem, fit: &LmmFit) -> Vec<(String, Vec<f64>)> {
    let l = linalg::robust_cholesky(&fit.g).unwrap_or_else(|| DMatrix::zeros(fit.g.nrows(), fit.g.ncols()));
    let s_inv = linalg::spd_inverse(&fit.sigma).unwrap_or_else(|| DMatrix::identity(fit.k, fit.k));
    let comps = Components {
        g: &l * l.transpose(),
        l,
        ls: DMatrix::zeros(0, 0),
        sigma: fit.sigma.clone(),
        s_inv,
        logdet_sigma: 0.0,
    };
    let beta = DVector::from_column_slice(&fit.beta);
    problem
        .groups
        .iter()
        .map(|gs| (gs.id.clone(), blup(gs, &comps, &beta).data.as_vec().clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn simulate(seed: u64, sd_int: f64, sd_slope: f64, sd_eps: f64) -> LmmProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let mut p = LmmProblem::new(1, vec!["(Intercept)".into(), "x".into()], vec!["(Intercept)".into(), "x".into()]);
        for i in 0..30 {
            let b0 = sd_int * n01.sample(&mut rng);
            let b1 = sd_slope * n01.sample(&mut rng);
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..12)
                .map(|c| {
                    let x = c as f64 / 4.0;
                    let y = 1.0 + 0.5 * x + b0 + b1 * x + sd_eps * n01.sample(&mut rng);
                    (vec![y], vec![1.0, x])
                })
                .collect();
            p.add_group(
                &format!("u{i}"),
                rows.iter().map(|(y, x)| Row { y, x, e: x }),
            )
            .unwrap();
        }
        p
    }

    #[test]
    fn recovers_fixed_effects() {
        let p = simulate(1, 0.5, 0.2, 0.1);
        let fit = fit(&p, &LmmOptions::default()).unwrap();
        assert!(fit.converged, "{:?}", fit.termination);
        let se = fit.std_errors();
        assert!((fit.beta[0] - 1.0).abs() < 4.0 * se[0]);
        assert!((fit.beta[1] - 0.5).abs() < 4.0 * se[1]);
        assert!((fit.sigma[(0, 0)].sqrt() - 0.1).abs() < 0.02);
        assert!(fit.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn unit_weights_match_unweighted() {
        let p = simulate(2, 0.5, 0.2, 0.1);
        let a = fit(&p, &LmmOptions::default()).unwrap();
        let b = fit_weighted(&p, &vec![1.0; 30], &LmmOptions::default(), None).unwrap();
        for (x, y) in a.beta.iter().zip(&b.beta) {
            assert!((x - y).abs() < 1e-8);
        }
        assert!((a.loglik - b.loglik).abs() < 1e-8);
    }

    #[test]
    fn collinear_columns_are_named() {
        let mut p = LmmProblem::new(1, vec!["(Intercept)".into(), "zero".into()], vec!["(Intercept)".into()]);
        for i in 0..3 {
            let rows: Vec<[f64; 2]> = (0..4).map(|_| [1.0, 0.0]).collect();
            let ys: Vec<[f64; 1]> = (0..4).map(|c| [c as f64 + i as f64]).collect();
            p.add_group(
                &format!("g{i}"),
                rows.iter().zip(&ys).map(|(x, y)| Row { y, x, e: &x[..1] }),
            )
            .unwrap();
        }
        match fit(&p, &LmmOptions::default()) {
            Err(Error::SingularDesign { columns }) => assert_eq!(columns, vec!["zero".to_string()]),
            other => panic!("expected singular design, got {other:?}"),
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut p = LmmProblem::new(2, vec!["(Intercept)".into(), "x".into()], vec!["(Intercept)".into(), "x".into()]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        for i in 0..6 {
            let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..5)
                .map(|c| {
                    let x = c as f64 * 0.7 + i as f64 * 0.1;
                    let y = vec![1.0 + x + n01.sample(&mut rng), -0.5 * x + 0.3 * n01.sample(&mut rng)];
                    (y, vec![1.0, x])
                })
                .collect();
            p.add_group(&format!("g{i}"), rows.iter().map(|(y, x)| Row { y, x, e: x })).unwrap();
        }
        let weights = [1.0, 0.5, 2.0, 1.3, 0.0, 0.9];
        for method in [Method::Reml, Method::Ml] {
            for diag in [false, true] {
                let opts = LmmOptions {
                    method,
                    diagonal_random: diag,
                    diagonal_residual: diag,
                    ..Default::default()
                };
                let n = linalg::log_cholesky_len(4, diag) + linalg::log_cholesky_len(2, diag);
                let theta: Vec<f64> = (0..n).map(|j| 0.3 * ((j * 7 % 5) as f64 - 2.0) / 2.0).collect();
                let g = evaluate(&p, &weights, &theta, &opts, true).unwrap().grad.unwrap();
                for j in 0..n {
                    let h = 1e-6;
                    let mut tp = theta.clone();
                    tp[j] += h;
                    let mut tm = theta.clone();
                    tm[j] -= h;
                    let fd = (objective(&p, &weights, &tp, &opts).unwrap().0
                        - objective(&p, &weights, &tm, &opts).unwrap().0)
                        / (2.0 * h);
                    assert!((fd - g[j]).abs() < 1e-5 * (1.0 + fd.abs()), "{method:?} diag={diag} j={j}: {fd} vs {}", g[j]);
                }
            }
        }
    }
}
