//! Quasi-Newton (BFGS) minimization with finite-difference gradients.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Relative change of the objective below which an iteration counts as stalled.
    pub f_rel_tol: f64,
    /// Max absolute parameter change for convergence.
    pub x_tol: f64,
    /// Consecutive stalled iterations (objective flat, parameters still moving)
    /// after which the objective is treated as flat along the search path.
    pub flat_patience: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            f_rel_tol: 1e-8,
            x_tol: 1e-6,
            flat_patience: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    /// Objective and parameter changes both under tolerance.
    Converged,
    /// Objective flat for `flat_patience` iterations while parameters drift
    /// (typically a variance component heading to the boundary).
    FlatObjective,
    /// No descent step found from a point with negligible gradient.
    Stationary,
    /// No descent step found.
    LineSearchFailed,
    MaxIterations,
    /// The data fit exactly; nothing was optimized.
    ExactFit,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(
            self,
            Termination::Converged | Termination::FlatObjective | Termination::Stationary | Termination::ExactFit
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Objective value after every accepted iteration (starting value first).
    pub trace: Vec<f64>,
    /// Final inverse-Hessian approximation, reusable as a warm start.
    pub inv_hessian: Vec<Vec<f64>>,
}

fn gradient<F: Fn(&[f64]) -> f64>(f: &F, x: &[f64], fx: f64) -> Vec<f64> {
    let mut xp = x.to_vec();
    let mut g = vec![0.0; x.len()];
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        g[i] = if fp.is_finite() && fm.is_finite() {
            (fp - fm) / (2.0 * h)
        } else if fp.is_finite() {
            (fp - fx) / h
        } else if fm.is_finite() {
            (fx - fm) / h
        } else {
            0.0
        };
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimize `f` from `x0` with central-difference gradients.
/// Non-finite objective values are treated as +inf.
pub fn minimize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], opts: &BfgsOptions) -> OptimResult {
    let fg = |x: &[f64], need_grad: bool| {
        let fx = f(x);
        if need_grad && fx.is_finite() {
            (fx, Some(gradient(&f, x, fx)))
        } else {
            (fx, None)
        }
    };
    minimize_fg(fg, x0, None, opts)
}

/// Minimize with a caller-supplied objective-and-gradient function.
///
/// `fg(x, true)` must return the gradient; `fg(x, false)` may skip it.
/// `h0` optionally seeds the inverse Hessian (e.g. from a previous fit).
pub fn minimize_fg<F>(fg: F, x0: &[f64], h0: Option<&[Vec<f64>]>, opts: &BfgsOptions) -> OptimResult
where
    F: Fn(&[f64], bool) -> (f64, Option<Vec<f64>>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut evals = 1;
    let (mut fx, g0) = fg(&x, true);
    let mut trace = vec![fx];
    let g0 = match g0 {
        Some(g) if n > 0 && fx.is_finite() && g.iter().all(|v| v.is_finite()) => g,
        _ => {
            return OptimResult {
                x,
                f: fx,
                iterations: 0,
                evaluations: evals,
                termination: if n == 0 {
                    Termination::Converged
                } else {
                    Termination::LineSearchFailed
                },
                trace,
                inv_hessian: identity(n),
            };
        }
    };
    let mut g = g0;
    let seeded = h0.filter(|h| h.len() == n && h.iter().all(|r| r.len() == n));
    let mut hinv = seeded.map_or_else(|| identity(n), |h| h.to_vec());
    let mut fresh_hessian = seeded.is_none();
    let mut stalled = 0;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        iterations += 1;
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&hinv[i], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            hinv = identity(n);
            fresh_hessian = true;
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }
        let gnorm = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if gnorm == 0.0 {
            termination = Termination::Stationary;
            break;
        }
        // limit the first step of a fresh Hessian to a unit max-norm move
        let dmax = dir.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut step = if fresh_hessian && dmax > 1.0 { 1.0 / dmax } else { 1.0 };
        let mut accepted = None;
        for _ in 0..50 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (fnew, _) = fg(&xn, false);
            evals += 1;
            if fnew.is_finite() && fnew <= fx + 1e-4 * step * slope {
                accepted = Some((xn, fnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if !fresh_hessian {
                hinv = identity(n);
                fresh_hessian = true;
                iterations -= 1;
                continue;
            }
            let scale = fx.abs().max(1.0);
            termination = if gnorm * x.iter().map(|v| v.abs()).fold(1.0, f64::max) < 1e-5 * scale {
                Termination::Stationary
            } else {
                Termination::LineSearchFailed
            };
            break;
        };
        let (_, gn) = fg(&xn, true);
        evals += 1;
        let Some(gn) = gn.filter(|g| g.iter().all(|v| v.is_finite())) else {
            termination = Termination::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let f_change = (fx - fnew).abs() / fx.abs().max(1.0);
        let x_change = s.iter().map(|v| v.abs()).fold(0.0, f64::max);
        x = xn;
        fx = fnew;
        g = gn;
        trace.push(fx);

        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if fresh_hessian {
                // scale the initial inverse Hessian
                let scale = sy / dot(&y, &y);
                for (i, row) in hinv.iter_mut().enumerate() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = scale;
                }
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            fresh_hessian = false;
        }

        if f_change < opts.f_rel_tol {
            if x_change < opts.x_tol {
                termination = Termination::Converged;
                break;
            }
            stalled += 1;
            if stalled >= opts.flat_patience {
                termination = Termination::FlatObjective;
                break;
            }
        } else {
            stalled = 0;
        }
    }

    OptimResult {
        x,
        f: fx,
        iterations,
        evaluations: evals,
        termination,
        trace,
        inv_hessian: hinv,
    }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            r
        })
        .collect()
}

fn bfgs_update(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let r = minimize(f, &[-1.2, 1.0], &BfgsOptions::default());
        assert!(r.termination.is_converged(), "{:?}", r.termination);
        assert!((r.x[0] - 1.0).abs() < 1e-4 && (r.x[1] - 1.0).abs() < 1e-4, "{:?}", r.x);
    }

    #[test]
    fn trace_is_monotone() {
        let f = |x: &[f64]| (x[0] - 3.0).powi(2) + 10.0 * (x[1] + 1.0).powi(4) + x[2].powi(2);
        let r = minimize(f, &[0.0, 0.0, 5.0], &BfgsOptions::default());
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((r.x[0] - 3.0).abs() < 1e-4);
    }
}
