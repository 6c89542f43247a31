//! Dense linear algebra: matrices, thin SVD, rank truncation,
//! orthonormalisation and ridge solves.

mod matrix;
mod solve;
mod svd;

pub use matrix::{dot, norm, Matrix};
pub use solve::{inverse, solve_ridge};
pub use svd::{
    low_rank, orthonormalize, singular_values, svd_thin, truncate_rank, SvdResult, JACOBI_MAX_SWEEPS,
    JACOBI_TOL, ORTHO_DROP_TOL,
};
