//! Uniform grids on [0, 1], trapezoid quadrature and linear interpolation.

use crate::error::{Error, Result};

/// Default number of grid points for scaled curves.
pub const DEFAULT_GRID_SIZE: usize = 300;

/// Uniform grid t_g = (g - 1) / (G - 1), g = 1..G.
pub fn uniform_grid(size: usize) -> Vec<f64> {
    assert!(size >= 2, "grid needs at least two points");
    let h = 1.0 / (size - 1) as f64;
    (0..size).map(|g| g as f64 * h).collect()
}

/// Trapezoid weights for the uniform grid of `size` points on [0, 1].
pub fn trapezoid_weights(size: usize) -> Vec<f64> {
    assert!(size >= 2, "grid needs at least two points");
    let h = 1.0 / (size - 1) as f64;
    let mut w = vec![h; size];
    w[0] = 0.5 * h;
    w[size - 1] = 0.5 * h;
    w
}

/// Trapezoid rule for values sampled on the uniform unit grid.
pub fn integrate_unit(values: &[f64]) -> f64 {
    let n = values.len();
    debug_assert!(n >= 2);
    let h = 1.0 / (n - 1) as f64;
    let inner: f64 = values[1..n - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoid rule of a product of two curves on the uniform unit grid.
pub fn inner_product(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let h = 1.0 / (n - 1) as f64;
    let inner: f64 = (1..n - 1).map(|g| a[g] * b[g]).sum();
    h * (inner + 0.5 * (a[0] * b[0] + a[n - 1] * b[n - 1]))
}

/// Trapezoid rule over arbitrary (strictly increasing) abscissae.
pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Piecewise linear interpolation of (xs, ys) at `x`; clamps outside the range.
///
/// `xs` must be strictly increasing.
pub fn interp_linear(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    // first index with xs[idx] > x
    let idx = xs.partition_point(|&v| v <= x);
    let (x0, x1) = (xs[idx - 1], xs[idx]);
    let (y0, y1) = (ys[idx - 1], ys[idx]);
    let s = (x - x0) / (x1 - x0);
    y0 + s * (y1 - y0)
}

/// Evaluate a curve given on the uniform unit grid at an arbitrary t in [0, 1].
pub fn eval_on_unit_grid(values: &[f64], t: f64) -> f64 {
    let n = values.len();
    let pos = t.clamp(0.0, 1.0) * (n - 1) as f64;
    let g = (pos.floor() as usize).min(n - 2);
    let s = pos - g as f64;
    values[g] + s * (values[g + 1] - values[g])
}

pub(crate) fn check_grid(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::GridMismatch { expected, found });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for g in [2, 3, 10, 300] {
            let s: f64 = trapezoid_weights(g).iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_functions_integrate_exactly() {
        let t = uniform_grid(11);
        let v: Vec<f64> = t.iter().map(|&t| 2.0 - 3.0 * t).collect();
        assert!((integrate_unit(&v) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn interp_hits_nodes() {
        let xs = [0.0, 10.0, 20.0];
        let ys = [4.2, 3.9, 2.7];
        assert_eq!(interp_linear(&xs, &ys, 10.0), 3.9);
        assert!((interp_linear(&xs, &ys, 15.0) - 3.3).abs() < 1e-12);
        let grid = [1.0, 2.0, 3.0];
        assert!((eval_on_unit_grid(&grid, 0.25) - 1.5).abs() < 1e-12);
        assert_eq!(eval_on_unit_grid(&grid, 1.0), 3.0);
    }
}
