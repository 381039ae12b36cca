//! B-spline bases on [0, 1] with equally spaced interior knots and exact
//! second-derivative roughness penalties.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineBasis {
    pub degree: usize,
    pub n_interior: usize,
    /// Full clamped knot vector (boundary knots repeated degree + 1 times).
    pub knots: Vec<f64>,
}

impl BSplineBasis {
    /// Basis of `size` functions of the given degree with equally spaced interior knots.
    pub fn new(size: usize, degree: usize) -> Result<Self> {
        if size < degree + 1 {
            return Err(Error::invalid(format!(
                "a degree-{degree} basis needs at least {} functions, got {size}",
                degree + 1
            )));
        }
        let n_interior = size - degree - 1;
        let mut knots = vec![0.0; degree + 1];
        for k in 1..=n_interior {
            knots.push(k as f64 / (n_interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, degree + 1));
        Ok(Self {
            degree,
            n_interior,
            knots,
        })
    }

    /// Cubic basis of `size` functions.
    pub fn cubic(size: usize) -> Result<Self> {
        Self::new(size, 3)
    }

    pub fn size(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Distinct knots 0 = κ_0 < ... < κ_m = 1.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b = self.knots[self.degree..self.knots.len() - self.degree].to_vec();
        b.dedup();
        b
    }

    /// Index μ of the knot span [k_μ, k_{μ+1}) containing t (last span closed).
    fn span(&self, t: f64) -> usize {
        let n = self.size();
        if t >= self.knots[n] {
            return n - 1;
        }
        if t <= self.knots[self.degree] {
            return self.degree;
        }
        // last μ with knots[μ] <= t
        self.knots.partition_point(|&k| k <= t) - 1
    }

    /// Values of all basis functions at t (Cox-de Boor recursion).
    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.eval_derivative(t, 0)
    }

    /// `order`-th derivative of every basis function at t.
    pub fn eval_derivative(&self, t: f64, order: usize) -> Vec<f64> {
        let t = t.clamp(0.0, 1.0);
        self.eval_in_span(t, self.span(t), order)
    }

    /// Derivatives using the polynomial piece of knot span `mu`.
    fn eval_in_span(&self, t: f64, mu: usize, order: usize) -> Vec<f64> {
        let p = self.degree;
        let n = self.size();
        let mut out = vec![0.0; n];
        if order > p {
            return out;
        }
        // non-zero basis functions of degree p - order on span mu: N_{mu-d..mu, d}
        let d = p - order;
        let mut vals = vec![0.0; d + 1];
        vals[0] = 1.0;
        for deg in 1..=d {
            let mut next = vec![0.0; d + 1];
            for j in 0..=deg {
                let i = mu + j - deg; // basis index
                let mut v = 0.0;
                if j >= 1 {
                    let (a, b) = (self.knots[i], self.knots[i + deg]);
                    if b > a {
                        v += (t - a) / (b - a) * vals[j - 1];
                    }
                }
                if j < deg {
                    let (a, b) = (self.knots[i + 1], self.knots[i + deg + 1]);
                    if b > a {
                        v += (b - t) / (b - a) * vals[j];
                    }
                }
                next[j] = v;
            }
            vals = next;
        }
        // raise to degree p through the derivative recursion:
        // N'_{i,k} = k (N_{i,k-1} / (t_{i+k} - t_i) - N_{i+1,k-1} / (t_{i+k+1} - t_{i+1}))
        let mut coef: Vec<(usize, f64)> = (0..=d).map(|j| (mu + j - d, vals[j])).collect();
        for k in d + 1..=p {
            let mut next: Vec<(usize, f64)> = Vec::with_capacity(coef.len() + 1);
            let lo = coef[0].0.saturating_sub(1);
            let hi = coef[coef.len() - 1].0;
            for i in lo..=hi {
                let get = |idx: usize| coef.iter().find(|c| c.0 == idx).map_or(0.0, |c| c.1);
                let mut v = 0.0;
                let den1 = self.knots[i + k] - self.knots[i];
                if den1 > 0.0 {
                    v += get(i) / den1;
                }
                let den2 = self.knots[i + k + 1] - self.knots[i + 1];
                if den2 > 0.0 {
                    v -= get(i + 1) / den2;
                }
                next.push((i, k as f64 * v));
            }
            coef = next;
        }
        for (i, v) in coef {
            if i < n {
                out[i] = v;
            }
        }
        out
    }

    /// Basis evaluated on the uniform grid of `grid_size` points (rows = grid points).
    pub fn grid_matrix(&self, grid_size: usize) -> DMatrix<f64> {
        let t = grid::uniform_grid(grid_size);
        let n = self.size();
        let mut m = DMatrix::zeros(grid_size, n);
        for (g, &tg) in t.iter().enumerate() {
            for (j, v) in self.eval(tg).into_iter().enumerate() {
                m[(g, j)] = v;
            }
        }
        m
    }

    /// ∫ B''_j B''_k over [0, 1]. Second derivatives of a cubic basis are
    /// piecewise linear, so Simpson's rule on every knot span is exact; for
    /// other degrees a Gauss-Legendre rule of sufficient order is used.
    pub fn penalty(&self) -> DMatrix<f64> {
        let n = self.size();
        let mut g = DMatrix::zeros(n, n);
        if self.degree < 2 {
            return g;
        }
        // Gauss-Legendre nodes on [-1, 1], exact to degree 9
        const NODES: [f64; 5] = [
            0.0,
            -0.538_469_310_105_683_1,
            0.538_469_310_105_683_1,
            -0.906_179_845_938_664,
            0.906_179_845_938_664,
        ];
        const WEIGHTS: [f64; 5] = [
            0.568_888_888_888_888_9,
            0.478_628_670_499_366_5,
            0.478_628_670_499_366_5,
            0.236_926_885_056_189_1,
            0.236_926_885_056_189_1,
        ];
        for mu in self.degree..self.size() {
            let (a, b) = (self.knots[mu], self.knots[mu + 1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            let pts: Vec<(f64, f64)> = if self.degree == 3 {
                vec![(a, half / 3.0), (mid, 4.0 * half / 3.0), (b, half / 3.0)]
            } else {
                NODES.iter().zip(WEIGHTS).map(|(x, wt)| (mid + half * x, half * wt)).collect()
            };
            for (t, wt) in pts {
                let d2 = self.eval_in_span(t, mu, 2);
                for i in 0..n {
                    if d2[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        g[(i, j)] += wt * d2[i] * d2[j];
                    }
                }
            }
        }
        g
    }

    /// Function values Σ c_j B_j on the uniform grid.
    pub fn function_on_grid(&self, coefs: &[f64], grid_size: usize) -> Vec<f64> {
        grid::uniform_grid(grid_size)
            .into_iter()
            .map(|t| self.eval(t).iter().zip(coefs).map(|(b, c)| b * c).sum())
            .collect()
    }
}

/// Trapezoid integrals ∫ x(t) B_j(t) dt of a curve on the uniform grid,
/// given the basis evaluated on that grid.
pub fn functional_design(values: &[f64], basis_grid: &DMatrix<f64>) -> Result<Vec<f64>> {
    grid::check_grid(basis_grid.nrows(), values.len())?;
    let w = grid::trapezoid_weights(values.len());
    Ok((0..basis_grid.ncols())
        .map(|j| (0..values.len()).map(|g| w[g] * values[g] * basis_grid[(g, j)]).sum())
        .collect())
}
