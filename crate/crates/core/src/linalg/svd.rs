//! Thin SVD by one-sided (Hestenes) Jacobi rotations, plus the rank
//! truncation and orthonormalisation helpers built on it.

use super::matrix::{dot, norm, Matrix};
use crate::error::{Error, Result};

/// Off-diagonal mass (largest column cosine) at which a sweep counts as converged.
pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;
/// Columns whose norm after projection falls below this (relative to their
/// original norm) are dropped by [`orthonormalize`].
pub const ORTHO_DROP_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m × k`, orthonormal columns.
    pub u: Matrix,
    /// Length `k`, non-increasing, nonnegative.
    pub sigma: Vec<f64>,
    /// `n × k`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        us.matmul_bt(&self.v).expect("svd factors are conformant")
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

/// Top-`k` singular triplets of `m`.
pub fn svd_thin(m: &Matrix, k: usize) -> Result<SvdResult> {
    let max = m.rows().min(m.cols());
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { rank: k, max });
    }
    m.ensure_finite("svd input")?;

    let (mut full, transposed) = if m.rows() >= m.cols() {
        (jacobi_tall(m), false)
    } else {
        (jacobi_tall(&m.transpose()), true)
    };
    if transposed {
        std::mem::swap(&mut full.u, &mut full.v);
    }
    fix_signs(&mut full);

    Ok(SvdResult {
        u: full.u.col_block(0, k),
        sigma: full.sigma[..k].to_vec(),
        v: full.v.col_block(0, k),
    })
}

/// All singular values of `m`, non-increasing.
pub fn singular_values(m: &Matrix) -> Result<Vec<f64>> {
    Ok(svd_thin(m, m.rows().min(m.cols()))?.sigma)
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns the full
/// thin decomposition sorted by descending singular value.
fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (m, n) = a.shape();
    let mut u: Vec<Vec<f64>> = (0..n).map(|c| a.col(c)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let alpha = dot(&u[i], &u[i]);
                let beta = dot(&u[j], &u[j]);
                let gamma = dot(&u[i], &u[j]);
                if alpha == 0.0 || beta == 0.0 || gamma == 0.0 {
                    continue;
                }
                let cosine = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(cosine);
                if cosine <= f64::EPSILON {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut u, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if off < JACOBI_TOL {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = u.iter().enumerate().map(|(i, col)| (norm(col), i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let negligible = sigma_max * f64::EPSILON * m as f64;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (pos, &(s, idx)) in order.iter().enumerate() {
        v_cols.push(v[idx].clone());
        if s > negligible && s > 0.0 {
            u_cols.push(u[idx].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            // Left vector is undetermined; filled by completion below.
            u_cols.push(Vec::new());
            sigma.push(if s > 0.0 { s } else { 0.0 });
            missing.push(pos);
        }
    }
    if !missing.is_empty() {
        complete_basis(&mut u_cols, &missing, m);
    }

    SvdResult { u: Matrix::from_cols(m, &u_cols), sigma, v: Matrix::from_cols(n, &v_cols) }
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(j);
    let (ci, cj) = (&mut lo[i], &mut hi[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills the empty columns listed in `missing` with unit vectors orthogonal to
/// every other column, drawing candidates from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in missing {
        loop {
            assert!(candidate < m, "basis completion exhausted the standard basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for col in cols.iter().filter(|c| !c.is_empty()) {
                    let p = dot(col, &e);
                    for (x, y) in e.iter_mut().zip(col) {
                        *x -= p * y;
                    }
                }
            }
            let nrm = norm(&e);
            if nrm > 1e-8 {
                cols[slot] = e.into_iter().map(|x| x / nrm).collect();
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of every left singular vector nonnegative.
fn fix_signs(svd: &mut SvdResult) {
    for c in 0..svd.u.cols() {
        let col = svd.u.col(c);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for r in 0..svd.u.rows() {
                svd.u[(r, c)] = -svd.u[(r, c)];
            }
            for r in 0..svd.v.rows() {
                svd.v[(r, c)] = -svd.v[(r, c)];
            }
        }
    }
}

/// Best rank-`r` Frobenius approximation as factors `B = U_r Σ_r`, `A = V_rᵀ`.
pub fn truncate_rank(m: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let svd = svd_thin(m, r)?;
    let mut b = svd.u.clone();
    let mut a = svd.v.transpose();
    for (j, &s) in svd.sigma.iter().enumerate() {
        for i in 0..b.rows() {
            b[(i, j)] *= s;
        }
        if s == 0.0 {
            a.row_mut(j).fill(0.0);
        }
    }
    Ok((b, a))
}

/// Rank-`r` approximation `U_r Σ_r V_rᵀ` as a single matrix.
pub fn low_rank(m: &Matrix, r: usize) -> Result<Matrix> {
    let (b, a) = truncate_rank(m, r)?;
    b.matmul(&a)
}

/// Orthonormal basis for the column space of `m` by modified Gram–Schmidt
/// with one re-orthogonalisation pass. Columns are processed left to right;
/// those that are numerically dependent on earlier ones are dropped.
pub fn orthonormalize(m: &Matrix) -> Result<Matrix> {
    if m.is_empty() {
        return Err(Error::Empty("orthonormalize".into()));
    }
    m.ensure_finite("orthonormalize input")?;
    let rows = m.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in 0..m.cols() {
        if basis.len() == rows {
            break;
        }
        let mut x = m.col(c);
        let original = norm(&x);
        if original == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for q in &basis {
                let p = dot(q, &x);
                for (xi, qi) in x.iter_mut().zip(q) {
                    *xi -= p * qi;
                }
            }
        }
        let residual = norm(&x);
        if residual < ORTHO_DROP_TOL * original.max(1.0) {
            continue;
        }
        basis.push(x.into_iter().map(|v| v / residual).collect());
    }
    if basis.is_empty() {
        return Err(Error::Empty("orthonormalize: all columns vanished".into()));
    }
    Ok(Matrix::from_cols(rows, &basis))
}
