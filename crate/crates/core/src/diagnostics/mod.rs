//! Scale sweeps, interpolation paths between adapters, the uniform-averaging
//! proxy, correlation analysis and numerical checkers for the
//! self-degradation, collateral-damage and stationarity results.

mod bounds;
mod stationarity;

pub use bounds::{
    check_cross_bound, check_cross_bound_fn, check_downscale_bound, check_downscale_bound_fn, BoundReport,
    DownscaleOptions, CrossOptions,
};
pub use stationarity::{check_stationarity, StationarityReport, StationarityToy};

use std::io::Write as _;
use std::path::Path;

use crate::backbone::{Eval, UpdateSet, Weights};
use crate::error::{Error, Result};
use crate::tasks::Dataset;

/// A scalable update: LoRA deltas on target layers or a fully fine-tuned
/// checkpoint whose update is `W − W₀`.
#[derive(Debug, Clone, Copy)]
pub enum Update<'a> {
    Lora(&'a UpdateSet),
    Full(&'a Weights),
}

impl Update<'_> {
    /// Weights `W₀ + s·ΔW`.
    pub fn at(&self, w0: &Weights, s: f64) -> Result<Weights> {
        match self {
            Update::Lora(u) => w0.with_update(u, s),
            Update::Full(w) => w.scaled_from(w0, s),
        }
    }

    pub fn evaluate(&self, w0: &Weights, s: f64, data: &Dataset) -> Result<Eval> {
        self.at(w0, s)?.evaluate(data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleSweep {
    pub grid: Vec<f64>,
    pub loss: Vec<f64>,
    /// `L(s) − L(1)`.
    pub delta_l: Vec<f64>,
    pub accuracy: Vec<f64>,
}

impl ScaleSweep {
    pub const CSV_HEADER: &'static str = "s,loss,delta_l,accuracy";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        for i in 0..self.grid.len() {
            writeln!(f, "{},{},{},{}", self.grid[i], self.loss[i], self.delta_l[i], self.accuracy[i])?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn at(&self, s: f64) -> Option<(f64, f64)> {
        self.grid.iter().position(|&g| g == s).map(|i| (self.delta_l[i], self.accuracy[i]))
    }
}

/// Exact loss and accuracy of `W₀ + s·ΔW` over `grid`, anchored at `s = 1`.
pub fn scale_sweep(w0: &Weights, update: Update<'_>, data: &Dataset, grid: &[f64]) -> Result<ScaleSweep> {
    if !grid.contains(&1.0) {
        return Err(Error::config("scale sweep grid must contain 1.0"));
    }
    let nominal = update.evaluate(w0, 1.0, data)?.loss;
    let mut out = ScaleSweep { grid: grid.to_vec(), loss: vec![], delta_l: vec![], accuracy: vec![] };
    for &s in grid {
        let e = if s == 1.0 { update.evaluate(w0, 1.0, data)? } else { update.evaluate(w0, s, data)? };
        out.loss.push(e.loss);
        out.delta_l.push(e.loss - nominal);
        out.accuracy.push(e.accuracy);
    }
    Ok(out)
}

/// β values where the midpoint statistics are taken.
pub const MID_WINDOW: [f64; 3] = [0.45, 0.5, 0.55];

#[derive(Debug, Clone, PartialEq)]
pub struct PairDiagnostics {
    pub kappa: String,
    pub tau: String,
    /// `‖ΔW_τ − ΔW_κ‖_F` over all target layers.
    pub v_norm: f64,
    pub beta_grid: Vec<f64>,
    pub loss_kappa: Vec<f64>,
    pub acc_kappa: Vec<f64>,
    pub loss_tau: Vec<f64>,
    pub acc_tau: Vec<f64>,
    /// `L_κ(β = ½) − L_κ(β = 0)`.
    pub dl_mid: f64,
    pub dl_mid_mean: f64,
    pub dl_mid_max: f64,
}

impl PairDiagnostics {
    pub const CSV_HEADER: &'static str = "beta,loss_kappa,acc_kappa,loss_tau,acc_tau";

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        for i in 0..self.beta_grid.len() {
            writeln!(
                f,
                "{},{},{},{},{}",
                self.beta_grid[i], self.loss_kappa[i], self.acc_kappa[i], self.loss_tau[i], self.acc_tau[i]
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Midpoint statistics of a 1-D loss profile `f(β)` relative to `f(0)`:
/// `(dl_mid, mean, max)` over [`MID_WINDOW`].
pub fn midpoint_stats(f: impl Fn(f64) -> Result<f64>) -> Result<(f64, f64, f64)> {
    let base = f(0.0)?;
    let vals: Vec<f64> = MID_WINDOW.iter().map(|&b| Ok(f(b)? - base)).collect::<Result<_>>()?;
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((vals[1], mean, max))
}

/// Evaluates `ΔW_κ + β(ΔW_τ − ΔW_κ)` on both tasks along `beta_grid`.
pub fn interpolation_path(
    w0: &Weights,
    kappa: (&str, &UpdateSet, &Dataset),
    tau: (&str, &UpdateSet, &Dataset),
    beta_grid: &[f64],
) -> Result<PairDiagnostics> {
    let (k_name, dk, data_k) = kappa;
    let (t_name, dt, data_t) = tau;
    let v = dt.sub(dk)?;
    let at = |beta: f64| -> Result<Weights> {
        if beta == 0.0 {
            w0.with_update(dk, 1.0)
        } else if beta == 1.0 {
            w0.with_update(dt, 1.0)
        } else {
            w0.with_update(&dk.lerp(dt, beta)?, 1.0)
        }
    };
    let mut out = PairDiagnostics {
        kappa: k_name.into(),
        tau: t_name.into(),
        v_norm: v.frobenius_norm(),
        beta_grid: beta_grid.to_vec(),
        loss_kappa: vec![],
        acc_kappa: vec![],
        loss_tau: vec![],
        acc_tau: vec![],
        dl_mid: 0.0,
        dl_mid_mean: 0.0,
        dl_mid_max: 0.0,
    };
    for &b in beta_grid {
        let w = at(b)?;
        let ek = w.evaluate(data_k)?;
        let et = w.evaluate(data_t)?;
        out.loss_kappa.push(ek.loss);
        out.acc_kappa.push(ek.accuracy);
        out.loss_tau.push(et.loss);
        out.acc_tau.push(et.accuracy);
    }
    let (mid, mean, max) = midpoint_stats(|b| Ok(at(b)?.evaluate(data_k)?.loss))?;
    out.dl_mid = mid;
    out.dl_mid_mean = mean;
    out.dl_mid_max = max;
    Ok(out)
}

/// Accuracy at `s = 1/N` for each `N`.
pub fn uniform_avg_proxy(w0: &Weights, update: Update<'_>, n_values: &[usize], data: &Dataset) -> Result<Vec<(usize, f64)>> {
    n_values
        .iter()
        .map(|&n| {
            if n == 0 {
                return Err(Error::config("uniform-average N must be at least 1"));
            }
            Ok((n, update.evaluate(w0, 1.0 / n as f64, data)?.accuracy))
        })
        .collect()
}

fn check_series(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape(format!("series lengths {} and {} differ", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} points, need at least 3", x.len())));
    }
    for (name, s) in [("x", x), ("y", y)] {
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("correlation series {name}")));
        }
        if s.iter().all(|&v| v == s[0]) {
            return Err(Error::UndefinedCorrelation(format!("series {name} is constant")));
        }
    }
    Ok(())
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties receiving their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_series(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Spearman and Pearson correlation between `v_norm` and `dl_mid_mean`.
pub fn midpoint_correlation(pairs: &[PairDiagnostics]) -> Result<(f64, f64)> {
    let x: Vec<f64> = pairs.iter().map(|p| p.v_norm).collect();
    let y: Vec<f64> = pairs.iter().map(|p| p.dl_mid_mean).collect();
    Ok((spearman(&x, &y)?, pearson(&x, &y)?))
}
