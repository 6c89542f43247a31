use serde::Serialize;

use crate::backbone::{UpdateSet, Weights};
use crate::error::{Error, Result};
use crate::tasks::Dataset;

use super::Update;

/// Outcome of one numerical bound check: `lhs ≥ rhs` is the claim.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub mu_hat: f64,
    pub eps_hat: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs − rhs`; negative values beyond `tolerance` are violations.
    pub margin: f64,
    pub tolerance: f64,
    pub satisfied: bool,
}

impl BoundReport {
    fn new(mu_hat: f64, eps_hat: f64, lhs: f64, rhs: f64, tolerance: f64) -> Self {
        let margin = lhs - rhs;
        Self { mu_hat, eps_hat, lhs, rhs, margin, tolerance, satisfied: margin >= -tolerance }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownscaleOptions {
    pub h: f64,
    pub grid_points: usize,
    pub tolerance: f64,
}

impl Default for DownscaleOptions {
    fn default() -> Self {
        Self { h: 1e-3, grid_points: 50, tolerance: 1e-6 }
    }
}

/// Checks `g(s) − g(1) ≥ ½μ̂(1−s)² − ε̂(1−s)` where `ε̂` is the central
/// difference at 1 and `μ̂` the smallest second difference on `[s, 1]`.
pub fn check_downscale_bound_fn(g: impl Fn(f64) -> Result<f64>, s: f64, opts: DownscaleOptions) -> Result<BoundReport> {
    if !(s.is_finite() && s > 0.0 && s <= 1.0) {
        return Err(Error::config(format!("down-scaling factor {s} outside (0, 1]")));
    }
    if opts.grid_points < 2 || !(opts.h > 0.0) {
        return Err(Error::config("bound check needs h > 0 and at least two grid points"));
    }
    let h = opts.h;
    let g1 = g(1.0)?;
    let eps_hat = ((g(1.0 + h)? - g(1.0 - h)?) / (2.0 * h)).abs();
    let n = opts.grid_points;
    let mut mu_hat = f64::INFINITY;
    for j in 0..n {
        let u = s + (1.0 - s) * j as f64 / (n - 1) as f64;
        let gu = if u == 1.0 { g1 } else { g(u)? };
        let d2 = (g(u + h)? - 2.0 * gu + g(u - h)?) / (h * h);
        mu_hat = mu_hat.min(d2);
    }
    let lhs = g(s)? - g1;
    let t = 1.0 - s;
    Ok(BoundReport::new(mu_hat, eps_hat, lhs, 0.5 * mu_hat * t * t - eps_hat * t, opts.tolerance))
}

/// [`check_downscale_bound_fn`] on `g(u) = L(W₀ + u·ΔW)` over `data`.
pub fn check_downscale_bound(
    w0: &Weights,
    update: Update<'_>,
    data: &Dataset,
    s: f64,
    opts: DownscaleOptions,
) -> Result<BoundReport> {
    check_downscale_bound_fn(|u| Ok(update.evaluate(w0, u, data)?.loss), s, opts)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossOptions {
    pub h: f64,
    pub quad_points: usize,
    pub tolerance: f64,
}

impl Default for CrossOptions {
    fn default() -> Self {
        Self { h: 1e-3, quad_points: 65, tolerance: 1e-6 }
    }
}

/// Checks `φ(1) − φ(0) ≥ μ̂‖V‖²/8 − ε̂‖V‖/2` for `φ(γ)` the loss at
/// `ΔW_κ + γV/2`, with `μ̂‖V‖²/8 = ∫₀¹ (1−γ) φ''(γ) dγ` by the trapezoid
/// rule and `ε̂ = ‖∇L_κ(ΔW_κ)‖`.
pub fn check_cross_bound_fn(
    phi: impl Fn(f64) -> Result<f64>,
    grad_norm: f64,
    v_norm: f64,
    opts: CrossOptions,
) -> Result<BoundReport> {
    if opts.quad_points < 2 || !(opts.h > 0.0) {
        return Err(Error::config("bound check needs h > 0 and at least two quadrature points"));
    }
    let h = opts.h;
    let n = opts.quad_points;
    let step = 1.0 / (n - 1) as f64;
    let mut integral = 0.0;
    for j in 0..n {
        let g = j as f64 * step;
        let d2 = (phi(g + h)? - 2.0 * phi(g)? + phi(g - h)?) / (h * h);
        let w = if j == 0 || j == n - 1 { 0.5 } else { 1.0 };
        integral += w * step * (1.0 - g) * d2;
    }
    let mu_hat = if v_norm > 0.0 { 8.0 * integral / (v_norm * v_norm) } else { 0.0 };
    let lhs = phi(1.0)? - phi(0.0)?;
    let rhs = integral - 0.5 * grad_norm * v_norm;
    Ok(BoundReport::new(mu_hat, grad_norm, lhs, rhs, opts.tolerance))
}

/// Cross-task bound for task κ along the segment towards the midpoint with
/// task τ, evaluated on κ's data.
pub fn check_cross_bound(
    w0: &Weights,
    delta_kappa: &UpdateSet,
    delta_tau: &UpdateSet,
    data_kappa: &Dataset,
    opts: CrossOptions,
) -> Result<BoundReport> {
    let v = delta_tau.sub(delta_kappa)?;
    let at_kappa = w0.with_update(delta_kappa, 1.0)?;
    let (_, grads) = at_kappa.loss_and_grad(data_kappa)?;
    let grad_norm = v
        .layers()
        .iter()
        .map(|&l| grads.layers[l].weight.frobenius_sq())
        .sum::<f64>()
        .sqrt();
    let phi = |g: f64| -> Result<f64> {
        let w = at_kappa.with_update(&v, 0.5 * g)?;
        Ok(w.evaluate(data_kappa)?.loss)
    };
    check_cross_bound_fn(phi, grad_norm, v.frobenius_norm(), opts)
}
