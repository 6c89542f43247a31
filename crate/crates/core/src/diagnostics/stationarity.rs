use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, singular_values, Matrix};
use crate::rng::{self, Purpose, Rng};
use crate::train::{ScaleDistribution, Weighting};

/// Least-squares toy with the protective term:
/// `J(x) = ℓ(x; 1) − λ E_s[w(s) ℓ(x; s)]`, `ℓ(x; s) = ‖sAx − b‖² / 2n`.
#[derive(Debug, Clone)]
pub struct StationarityToy {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub lambda: f64,
    pub dist: ScaleDistribution,
    pub weighting: Weighting,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationarityReport {
    pub t_list: Vec<usize>,
    pub c: f64,
    /// `min_t ‖∇J(x_t)‖²` for each horizon.
    pub min_grad_sq: Vec<f64>,
    pub grad_variance_estimate: f64,
    pub loglog_slope: f64,
}

impl StationarityToy {
    pub fn seeded(n: usize, d: usize, lambda: f64, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, "stationarity-data", Purpose::Toy);
        let a = Matrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut r));
        let b = (0..n).map(|_| StandardNormal.sample(&mut r)).collect();
        let toy = Self { a, b, lambda, dist: ScaleDistribution::default(), weighting: Weighting::default(), batch_size: 8 };
        toy.validate()?;
        Ok(toy)
    }

    /// `E[w(s) s^k]` under the scale law.
    pub fn moment(&self, k: i32) -> f64 {
        let p = k - i32::from(self.weighting == Weighting::InverseScale);
        let mut total = 0.0;
        let mut len = 0.0;
        for (lo, hi) in self.dist.intervals() {
            len += hi - lo;
            total += if p == -1 {
                (hi / lo).ln()
            } else {
                (hi.powi(p + 1) - lo.powi(p + 1)) / (p + 1) as f64
            };
        }
        total / len
    }

    pub fn validate(&self) -> Result<()> {
        self.dist.validate()?;
        if self.a.rows() != self.b.len() || self.a.rows() == 0 {
            return Err(Error::shape("toy design and targets disagree"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("toy batch size must be positive"));
        }
        if !(self.lambda >= 0.0 && 1.0 - self.lambda * self.moment(2) > 0.0) {
            return Err(Error::config(format!("λ = {} makes the toy objective unbounded below", self.lambda)));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.a.cols()
    }

    /// Lipschitz constant of `∇J`.
    pub fn smoothness(&self) -> Result<f64> {
        let s = singular_values(&self.a)?;
        Ok((1.0 - self.lambda * self.moment(2)) * s[0] * s[0] / self.a.rows() as f64)
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let n = self.a.rows() as f64;
        let (m0, m1, m2) = (self.moment(0), self.moment(1), self.moment(2));
        (0..self.a.rows())
            .map(|i| {
                let p = dot(self.a.row(i), x);
                let y = self.b[i];
                let nominal = (p - y).powi(2);
                let off = m2 * p * p - 2.0 * m1 * p * y + m0 * y * y;
                0.5 * (nominal - self.lambda * off)
            })
            .sum::<f64>()
            / n
    }

    pub fn full_grad(&self, x: &[f64]) -> Vec<f64> {
        let n = self.a.rows() as f64;
        let c2 = 1.0 - self.lambda * self.moment(2);
        let c1 = 1.0 - self.lambda * self.moment(1);
        let mut g = vec![0.0; self.dim()];
        for i in 0..self.a.rows() {
            let row = self.a.row(i);
            let coef = c2 * dot(row, x) - c1 * self.b[i];
            for (gj, aj) in g.iter_mut().zip(row) {
                *gj += coef * aj / n;
            }
        }
        g
    }

    /// Minibatch gradient with one scale draw; unbiased for [`Self::full_grad`].
    pub fn stochastic_grad(&self, x: &[f64], r: &mut Rng) -> Vec<f64> {
        let s = self.dist.sample(r);
        let ws = self.lambda * self.weighting.weight(s) * s;
        let m = self.batch_size as f64;
        let mut g = vec![0.0; self.dim()];
        for _ in 0..self.batch_size {
            let i = r.random_range(0..self.a.rows());
            let row = self.a.row(i);
            let p = dot(row, x);
            let coef = (p - self.b[i]) - ws * (s * p - self.b[i]);
            for (gj, aj) in g.iter_mut().zip(row) {
                *gj += coef * aj / m;
            }
        }
        g
    }

    /// `E‖g − ∇J(x)‖²` from `samples` stochastic gradients.
    pub fn grad_variance(&self, x: &[f64], samples: usize, r: &mut Rng) -> f64 {
        let full = self.full_grad(x);
        (0..samples)
            .map(|_| self.stochastic_grad(x, r).iter().zip(&full).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum::<f64>()
            / samples as f64
    }

    /// Squared full-gradient norms along `steps` iterations of SGD with step
    /// `eta` from the origin; `stochastic = false` uses exact gradients.
    pub fn run(&self, eta: f64, steps: usize, stochastic: bool, r: &mut Rng) -> (Vec<f64>, Vec<f64>) {
        let mut x = vec![0.0; self.dim()];
        let mut norms = Vec::with_capacity(steps + 1);
        for _ in 0..steps {
            let full = self.full_grad(&x);
            norms.push(dot(&full, &full));
            let g = if stochastic { self.stochastic_grad(&x, r) } else { full };
            for (xi, gi) in x.iter_mut().zip(&g) {
                *xi -= eta * gi;
            }
        }
        let full = self.full_grad(&x);
        norms.push(dot(&full, &full));
        (norms, x)
    }
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let num: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

/// SGD with `η = c/√T` for each horizon `T`; reports the best squared
/// gradient norm and the log-log slope against `T`.
pub fn check_stationarity(toy: &StationarityToy, t_list: &[usize], c: f64, seed: u64) -> Result<StationarityReport> {
    toy.validate()?;
    if t_list.len() < 2 || t_list.contains(&0) {
        return Err(Error::config("stationarity check needs at least two positive horizons"));
    }
    if !(c > 0.0) {
        return Err(Error::config("step constant must be positive"));
    }
    let mut min_grad_sq = Vec::new();
    let mut last_x = vec![0.0; toy.dim()];
    for &t in t_list {
        let mut r = rng::stream(seed, &format!("stationarity-T{t}"), Purpose::Toy);
        let (norms, x) = toy.run(c / (t as f64).sqrt(), t, true, &mut r);
        if norms.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("toy SGD at horizon {t}")));
        }
        min_grad_sq.push(norms[..t].iter().cloned().fold(f64::INFINITY, f64::min));
        last_x = x;
    }
    let mut r = rng::stream(seed, "stationarity-variance", Purpose::Toy);
    let grad_variance_estimate = toy.grad_variance(&last_x, 2000, &mut r);
    let lx: Vec<f64> = t_list.iter().map(|&t| (t as f64).ln()).collect();
    let ly: Vec<f64> = min_grad_sq.iter().map(|v| v.max(1e-300).ln()).collect();
    Ok(StationarityReport {
        t_list: t_list.to_vec(),
        c,
        min_grad_sq,
        grad_variance_estimate,
        loglog_slope: slope(&lx, &ly),
    })
}
