//! Functional principal component analysis of curves on a common uniform grid.
//!
//! The sample covariance surface is discretized on the grid and the integral
//! operator eigenproblem ∫ C(s, t) φ(t) dt = λ φ(s) is solved through the
//! symmetric matrix W^{1/2} C W^{1/2}, where W holds the trapezoid weights.
//! Eigenfunctions are then orthonormal under the same quadrature rule.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::ScaledCurve;
use crate::error::{Error, Result};
use crate::grid;

/// How many components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentSelection {
    Fixed(usize),
    /// Smallest K whose cumulative explained fraction reaches the threshold.
    VarianceThreshold(f64),
}

impl Default for ComponentSelection {
    fn default() -> Self {
        ComponentSelection::Fixed(3)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FpcaOptions {
    pub selection: ComponentSelection,
    /// Half-width of a moving-average pre-smoother applied to every curve
    /// before estimation; `None` disables smoothing.
    pub presmooth_half_width: Option<usize>,
}

/// Fitted mean, eigenfunctions and eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpcaModel {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub k: usize,
    /// Cumulative fraction of total variance explained by components 1..=j.
    pub explained_fraction: Vec<f64>,
    /// Integrated sample variance ∫ C(t, t) dt.
    pub total_variance: f64,
    pub n_curves: usize,
}

/// FPC scores of one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub unit_id: String,
    pub cycle: u32,
    pub scores: Vec<f64>,
}

fn moving_average(values: &[f64], half: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|g| {
            let lo = g.saturating_sub(half);
            let hi = (g + half).min(n - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Fit FPCA on scaled curves sharing a grid.
pub fn fit_fpca(curves: &[&ScaledCurve], opts: &FpcaOptions) -> Result<FpcaModel> {
    let values: Vec<&[f64]> = curves.iter().map(|c| c.values.as_slice()).collect();
    fit_fpca_values(&values, opts)
}

/// [`fit_fpca`] over raw grid vectors.
pub fn fit_fpca_values(curves: &[&[f64]], opts: &FpcaOptions) -> Result<FpcaModel> {
    let n = curves.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("FPCA needs at least 2 curves, got {n}")));
    }
    let g = curves[0].len();
    if g < 2 {
        return Err(Error::invalid("curves need at least 2 grid points"));
    }
    for c in curves {
        grid::check_grid(g, c.len())?;
        if c.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite curve value"));
        }
    }
    if let ComponentSelection::Fixed(k) = opts.selection {
        if k == 0 || k > n || k > g {
            return Err(Error::InsufficientData(format!(
                "cannot extract {k} components from {n} curves on {g} grid points"
            )));
        }
    }
    if let ComponentSelection::VarianceThreshold(f) = opts.selection {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("variance threshold {f} outside (0, 1]")));
        }
    }

    let smoothed: Vec<Vec<f64>>;
    let curves: Vec<&[f64]> = match opts.presmooth_half_width {
        Some(h) if h > 0 => {
            smoothed = curves.iter().map(|c| moving_average(c, h)).collect();
            smoothed.iter().map(|c| c.as_slice()).collect()
        }
        _ => curves.to_vec(),
    };

    let mut mean = vec![0.0; g];
    for c in &curves {
        for (m, v) in mean.iter_mut().zip(c.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let w = grid::trapezoid_weights(g);
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    // rows: centered curves scaled by sqrt(w)
    let centered = DMatrix::from_fn(n, g, |i, j| (curves[i][j] - mean[j]) * sw[j]);
    let mut cov = centered.tr_mul(&centered);
    cov /= (n - 1) as f64;
    let total_variance = cov.trace();

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = 1.0 + grid::inner_product(&mean, &mean);
    let lam_max = eig.eigenvalues[order[0]];
    if !(lam_max > 1e-13 * scale) || !(total_variance > 0.0) {
        return Err(Error::DegenerateCovariance);
    }
    let positive: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&j| eig.eigenvalues[j] > 1e-12 * lam_max)
        .collect();

    let k = match opts.selection {
        ComponentSelection::Fixed(k) => {
            if k > positive.len() {
                return Err(Error::InsufficientData(format!(
                    "requested {k} components but the covariance has rank {}",
                    positive.len()
                )));
            }
            k
        }
        ComponentSelection::VarianceThreshold(f) => {
            let mut acc = 0.0;
            let mut k = positive.len();
            for (idx, &j) in positive.iter().enumerate() {
                acc += eig.eigenvalues[j];
                if acc / total_variance >= f - 1e-12 {
                    k = idx + 1;
                    break;
                }
            }
            k
        }
    };

    let mut eigenfunctions = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    let mut explained_fraction = Vec::with_capacity(k);
    let mut acc = 0.0;
    for &j in positive.iter().take(k) {
        let lam = eig.eigenvalues[j];
        let col = eig.eigenvectors.column(j);
        let mut phi: Vec<f64> = (0..g).map(|t| col[t] / sw[t]).collect();
        // renormalize under the quadrature rule
        let norm = grid::inner_product(&phi, &phi).sqrt();
        phi.iter_mut().for_each(|v| *v /= norm);
        apply_sign_convention(&mut phi);
        acc += lam;
        eigenvalues.push(lam);
        explained_fraction.push(acc / total_variance);
        eigenfunctions.push(phi);
    }

    Ok(FpcaModel {
        grid: grid::uniform_grid(g),
        mean,
        eigenfunctions,
        eigenvalues,
        k,
        explained_fraction,
        total_variance,
        n_curves: n,
    })
}

/// Make ∫φ ≥ 0; when the integral vanishes, make the first nonzero value positive.
fn apply_sign_convention(phi: &mut [f64]) {
    let integral = grid::integrate_unit(phi);
    let tol = 1e-10 * phi.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let flip = if integral.abs() > tol {
        integral < 0.0
    } else {
        phi.iter().find(|v| v.abs() > tol).is_some_and(|v| *v < 0.0)
    };
    if flip {
        phi.iter_mut().for_each(|v| *v = -*v);
    }
}

impl FpcaModel {
    pub fn grid_size(&self) -> usize {
        self.mean.len()
    }

    /// Scores γ_j = ∫ (x - μ) φ_j by trapezoid quadrature.
    pub fn scores_of(&self, values: &[f64]) -> Result<Vec<f64>> {
        grid::check_grid(self.grid_size(), values.len())?;
        let centered: Vec<f64> = values.iter().zip(&self.mean).map(|(x, m)| x - m).collect();
        Ok(self
            .eigenfunctions
            .iter()
            .map(|phi| grid::inner_product(&centered, phi))
            .collect())
    }

    /// μ + Σ γ_j φ_j on the grid.
    pub fn reconstruct_values(&self, scores: &[f64]) -> Result<Vec<f64>> {
        if scores.len() != self.k {
            return Err(Error::invalid(format!(
                "expected {} scores, got {}",
                self.k,
                scores.len()
            )));
        }
        let mut out = self.mean.clone();
        for (gamma, phi) in scores.iter().zip(&self.eigenfunctions) {
            for (o, p) in out.iter_mut().zip(phi) {
                *o += gamma * p;
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn project_scores(model: &FpcaModel, curve: &ScaledCurve) -> Result<ScoreVector> {
    Ok(ScoreVector {
        unit_id: curve.unit_id.clone(),
        cycle: curve.cycle,
        scores: model.scores_of(&curve.values)?,
    })
}

pub fn reconstruct_curve(model: &FpcaModel, scores: &ScoreVector) -> Result<ScaledCurve> {
    Ok(ScaledCurve {
        unit_id: scores.unit_id.clone(),
        cycle: scores.cycle,
        values: model.reconstruct_values(&scores.scores)?,
    })
}
