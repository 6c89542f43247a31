use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Pivots below this fraction of the largest diagonal entry are treated as zero.
const PIVOT_TOL: f64 = 1e-13;

/// Solves `X (a + ridge·I) = b` for `X`, where `a` is symmetric PSD.
///
/// Uses a Cholesky factorisation of `a + ridge·I`; `b` may have any number of
/// rows.
pub fn solve_ridge(a: &Matrix, b: &Matrix, ridge: f64) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::shape(format!("solve_ridge: a is {}x{}", a.rows(), a.cols())));
    }
    if b.cols() != n {
        return Err(Error::shape(format!("solve_ridge: b has {} cols, a is {n}x{n}", b.cols())));
    }
    if !(ridge >= 0.0) {
        return Err(Error::config(format!("ridge must be nonnegative, got {ridge}")));
    }
    a.ensure_finite("solve_ridge a")?;
    b.ensure_finite("solve_ridge b")?;
    let scale = a.max_abs().max(ridge).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-9 * scale {
                return Err(Error::shape("solve_ridge: a is not symmetric"));
            }
        }
    }

    let mut shifted = a.clone();
    for i in 0..n {
        shifted[(i, i)] += ridge;
    }
    let l = cholesky(&shifted)?;

    // (a + ridge I) is symmetric, so each row x of X solves (a + ridge I) xᵀ = bᵀ.
    let mut x = Matrix::zeros(b.rows(), n);
    let mut y = vec![0.0; n];
    for r in 0..b.rows() {
        let rhs = b.row(r);
        for i in 0..n {
            let mut s = rhs[i];
            for k in 0..i {
                s -= l[(i, k)] * y[k];
            }
            y[i] = s / l[(i, i)];
        }
        let out = x.row_mut(r);
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[(k, i)] * out[k];
            }
            out[i] = s / l[(i, i)];
        }
    }
    x.ensure_finite("solve_ridge result")?;
    Ok(x)
}

/// Lower-triangular `L` with `L Lᵀ = m`.
fn cholesky(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let tol = PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE) * n.max(1) as f64;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return Err(Error::Singular(format!("cholesky pivot {j} = {d:e}")));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// General square inverse by Gauss–Jordan elimination with partial pivoting.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::shape(format!("inverse of {}x{}", m.rows(), m.cols())));
    }
    m.ensure_finite("inverse input")?;
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if a[(r, col)].abs() > a[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if a[(pivot, col)].abs() <= PIVOT_TOL * scale {
            return Err(Error::Singular(format!("inverse: column {col} has no usable pivot")));
        }
        if pivot != col {
            for c in 0..n {
                let t = a[(col, c)];
                a[(col, c)] = a[(pivot, c)];
                a[(pivot, c)] = t;
                let t = inv[(col, c)];
                inv[(col, c)] = inv[(pivot, c)];
                inv[(pivot, c)] = t;
            }
        }
        let p = a[(col, col)];
        for c in 0..n {
            a[(col, c)] /= p;
            inv[(col, c)] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[(r, col)];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[(r, c)] -= f * a[(col, c)];
                inv[(r, c)] -= f * inv[(col, c)];
            }
        }
    }
    inv.ensure_finite("inverse result")?;
    Ok(inv)
}
