//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

/// Kronecker product a ⊗ b.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Column-major vectorization of a matrix.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// Number of free parameters of a log-Cholesky factor of a `dim`-square matrix.
pub fn log_cholesky_len(dim: usize, diagonal: bool) -> usize {
    if diagonal {
        dim
    } else {
        dim * (dim + 1) / 2
    }
}

/// Lower-triangular factor from its log-Cholesky parameters (row-major lower
/// triangle, diagonal entries on log scale).
pub fn log_cholesky_factor(theta: &[f64], dim: usize, diagonal: bool) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(dim, dim);
    if diagonal {
        for i in 0..dim {
            l[(i, i)] = theta[i].exp();
        }
        return l;
    }
    let mut k = 0;
    for i in 0..dim {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[k].exp() } else { theta[k] };
            k += 1;
        }
    }
    l
}

/// Log-Cholesky parameters of a symmetric positive-definite matrix.
///
/// Falls back to a ridge-stabilized or diagonal factor when `m` is only
/// semi-definite.
pub fn log_cholesky_params(m: &DMatrix<f64>, diagonal: bool) -> Vec<f64> {
    let dim = m.nrows();
    let floor = 1e-12_f64.max(1e-8 * m.diagonal().max());
    if diagonal {
        return (0..dim).map(|i| m[(i, i)].max(floor).sqrt().ln()).collect();
    }
    let l = robust_cholesky(m).unwrap_or_else(|| {
        let mut d = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            d[(i, i)] = m[(i, i)].max(floor).sqrt();
        }
        d
    });
    let mut out = Vec::with_capacity(dim * (dim + 1) / 2);
    for i in 0..dim {
        for j in 0..=i {
            out.push(if i == j { l[(i, i)].max(1e-300).ln() } else { l[(i, j)] });
        }
    }
    out
}

/// Cholesky factor of a PSD matrix, retrying with a small diagonal ridge.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Some(c.l());
    }
    let scale = m.diagonal().abs().max().max(1e-300);
    for k in [1e-12, 1e-10, 1e-8] {
        let mut r = m.clone();
        for i in 0..r.nrows() {
            r[(i, i)] += k * scale;
        }
        if let Some(c) = Cholesky::new(r) {
            return Some(c.l());
        }
    }
    None
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(m.clone()).map(|c| c.inverse())
}

/// Log-determinant from a Cholesky factorization.
pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Symmetrize in place: (m + m') / 2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Indices of columns of a Gram matrix that are (numerically) linear
/// combinations of the preceding columns.
pub fn collinear_columns(gram: &DMatrix<f64>, rel_tol: f64) -> Vec<usize> {
    let p = gram.nrows();
    let mut kept: Vec<usize> = Vec::new();
    let mut bad = Vec::new();
    for j in 0..p {
        let gjj = gram[(j, j)];
        if !(gjj > 0.0) {
            bad.push(j);
            continue;
        }
        let resid = if kept.is_empty() {
            gjj
        } else {
            let sub = DMatrix::from_fn(kept.len(), kept.len(), |a, b| gram[(kept[a], kept[b])]);
            let v = DVector::from_fn(kept.len(), |a, _| gram[(kept[a], j)]);
            match sub.clone().cholesky() {
                Some(c) => gjj - v.dot(&c.solve(&v)),
                None => gjj,
            }
        };
        if resid <= rel_tol * gjj {
            bad.push(j);
        } else {
            kept.push(j);
        }
    }
    bad
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_cholesky_round_trip() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let th = log_cholesky_params(&m, false);
        assert_eq!(th.len(), 6);
        let l = log_cholesky_factor(&th, 3, false);
        let back = &l * l.transpose();
        assert!((back - m).abs().max() < 1e-12);
    }

    #[test]
    fn collinear_detection() {
        // columns: 1, c, 2c, 0
        let x = DMatrix::from_fn(5, 4, |i, j| match j {
            0 => 1.0,
            1 => (i + 1) as f64,
            2 => 2.0 * (i + 1) as f64,
            _ => 0.0,
        });
        let g = x.transpose() * &x;
        assert_eq!(collinear_columns(&g, 1e-10), vec![2, 3]);
    }
}
