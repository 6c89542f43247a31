//! Merging operators over sets of per-layer update matrices.
//!
//! TA, TIES, DARE, TSV and CART act on task updates `ΔW_i` (or on any
//! matrix representation of them, see [`crate::spaces`]); RegMean and CoM
//! act on full layer weights and need input statistics.
//!
//! TIES convention: `trim_keep` is the fraction of entries KEPT per task
//! matrix, by magnitude. `trim_keep = 1` disables trimming.

mod regression;

pub use regression::{gram, merge_com, merge_models_regmean, merge_regmean, GramStats};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, svd_thin, truncate_rank, Matrix};
use crate::rng::{self, Purpose, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operator {
    Ta,
    Ties,
    TiesDare,
    Tsv,
    Cart,
    Regmean,
    Com,
}

impl Operator {
    pub const ALL: [Operator; 7] =
        [Operator::Ta, Operator::Ties, Operator::TiesDare, Operator::Tsv, Operator::Cart, Operator::Regmean, Operator::Com];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Ta => "ta",
            Operator::Ties => "ties",
            Operator::TiesDare => "ties_dare",
            Operator::Tsv => "tsv",
            Operator::Cart => "cart",
            Operator::Regmean => "regmean",
            Operator::Com => "com",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Operator::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::config(format!("unknown operator {s:?}")))
    }

    /// Operators needing proxy activations rather than updates alone.
    pub fn is_data_dependent(self) -> bool {
        matches!(self, Operator::Regmean | Operator::Com)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DareInner {
    #[default]
    Ties,
    Ta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeSpec {
    pub operator: Operator,
    /// Shared merging coefficient `s`.
    pub coefficient: f64,
    /// TIES kept fraction τ.
    pub trim_keep: f64,
    /// DARE keep probability p.
    pub dare_keep: f64,
    pub dare_inner: DareInner,
    /// CART truncation rank; `None` uses `cart_fraction` of the layer's
    /// smaller dimension.
    pub cart_rank: Option<usize>,
    pub cart_fraction: f64,
    /// TSV per-task rank; `None` picks `min_dim / N`.
    pub tsv_rank: Option<usize>,
    /// RegMean/CoM ridge; `None` uses `1e-6 · trace(ΣG) / dim`.
    pub ridge: Option<f64>,
    pub seed: u64,
}

impl MergeSpec {
    pub fn new(operator: Operator) -> Self {
        Self {
            operator,
            coefficient: 1.0,
            trim_keep: 1.0,
            dare_keep: 1.0,
            dare_inner: DareInner::Ties,
            cart_rank: None,
            cart_fraction: 0.16,
            tsv_rank: None,
            ridge: None,
            seed: 0,
        }
    }

    pub fn with_coefficient(&self, s: f64) -> Self {
        Self { coefficient: s, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.coefficient.is_finite() {
            return Err(Error::config("merge coefficient must be finite"));
        }
        if !(self.trim_keep > 0.0 && self.trim_keep <= 1.0) {
            return Err(Error::config(format!("trim_keep must lie in (0, 1], got {}", self.trim_keep)));
        }
        if !(self.dare_keep > 0.0 && self.dare_keep <= 1.0) {
            return Err(Error::config(format!("dare_keep must lie in (0, 1], got {}", self.dare_keep)));
        }
        if !(self.cart_fraction > 0.0 && self.cart_fraction <= 1.0) {
            return Err(Error::config(format!("cart_fraction must lie in (0, 1], got {}", self.cart_fraction)));
        }
        if matches!(self.ridge, Some(r) if !(r >= 0.0)) {
            return Err(Error::config("ridge must be nonnegative"));
        }
        Ok(())
    }
}

fn check_same_shape(mats: &[&Matrix]) -> Result<(usize, usize)> {
    let first = mats.first().ok_or_else(|| Error::Empty("merge input list".into()))?;
    let shape = first.shape();
    if let Some(m) = mats.iter().find(|m| m.shape() != shape) {
        return Err(Error::shape(format!("merge inputs {:?} and {:?} differ", shape, m.shape())));
    }
    Ok(shape)
}

/// Task arithmetic: `s · Σ ΔW_i`.
pub fn merge_ta(deltas: &[&Matrix], s: f64) -> Result<Matrix> {
    let (r, c) = check_same_shape(deltas)?;
    let mut out = Matrix::zeros(r, c);
    for d in deltas {
        out.axpy(1.0, d)?;
    }
    out.scale_in_place(s);
    Ok(out)
}

/// Keeps the `ceil(keep · len)` largest-magnitude entries; ties at the
/// threshold go to the lower flat index.
pub fn trim_top(m: &Matrix, keep: f64) -> Matrix {
    let n = m.as_slice().len();
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n.max(1));
    if k >= n {
        return m.clone();
    }
    let vals = m.as_slice();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| vals[b].abs().total_cmp(&vals[a].abs()).then(a.cmp(&b)));
    let mut out = Matrix::zeros(m.rows(), m.cols());
    let data = out.as_mut_slice();
    for &i in &idx[..k] {
        data[i] = vals[i];
    }
    out
}

/// TIES: trim each task to its top `keep` fraction, elect per-coordinate
/// sign by summed magnitude (ties positive), average surviving entries of
/// the elected sign, scale by `s`.
pub fn merge_ties(deltas: &[&Matrix], keep: f64, s: f64) -> Result<Matrix> {
    let (r, c) = check_same_shape(deltas)?;
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(Error::config(format!("TIES keep fraction must lie in (0, 1], got {keep}")));
    }
    let trimmed: Vec<Matrix> = deltas.iter().map(|d| trim_top(d, keep)).collect();
    let mut out = Matrix::zeros(r, c);
    let data = out.as_mut_slice();
    for (j, o) in data.iter_mut().enumerate() {
        let (mut pos, mut neg) = (0.0, 0.0);
        for t in &trimmed {
            let v = t.as_slice()[j];
            if v > 0.0 {
                pos += v;
            } else {
                neg -= v;
            }
        }
        let positive = pos >= neg;
        let (mut sum, mut count) = (0.0, 0usize);
        for t in &trimmed {
            let v = t.as_slice()[j];
            if (positive && v > 0.0) || (!positive && v < 0.0) {
                sum += v;
                count += 1;
            }
        }
        *o = if count > 0 { s * sum / count as f64 } else { 0.0 };
    }
    Ok(out)
}

/// Bernoulli(`p`) keep mask with survivors rescaled by `1/p`.
pub fn dare_mask(m: &Matrix, p: f64, r: &mut Rng) -> Matrix {
    if p >= 1.0 {
        return m.clone();
    }
    let mut out = m.clone();
    for v in out.as_mut_slice() {
        *v = if r.random_bool(p) { *v / p } else { 0.0 };
    }
    out
}

/// DARE: random drop-and-rescale of each task, then the inner operator.
pub fn merge_dare(deltas: &[&Matrix], p: f64, inner: DareInner, trim_keep: f64, s: f64, r: &mut Rng) -> Result<Matrix> {
    check_same_shape(deltas)?;
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("DARE keep probability must lie in (0, 1], got {p}")));
    }
    let masked: Vec<Matrix> = deltas.iter().map(|d| dare_mask(d, p, r)).collect();
    let refs: Vec<&Matrix> = masked.iter().collect();
    match inner {
        DareInner::Ties => merge_ties(&refs, trim_keep, s),
        DareInner::Ta => merge_ta(&refs, s),
    }
}

/// TSV-style merge: per-task rank-`rank` truncation, orthonormalised union
/// of left singular bases, projection of every task onto it, scaled by `s`.
pub fn merge_tsv(deltas: &[&Matrix], rank: usize, s: f64) -> Result<Matrix> {
    let (r, c) = check_same_shape(deltas)?;
    let max = r.min(c);
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    if deltas.iter().all(|d| d.max_abs() == 0.0) {
        return Err(Error::Empty("TSV inputs are all zero".into()));
    }
    let mut bases = Vec::new();
    let mut lowrank = Vec::new();
    for d in deltas {
        if d.max_abs() == 0.0 {
            continue;
        }
        let svd = svd_thin(d, rank)?;
        let keep: Vec<usize> = (0..rank).filter(|&i| svd.sigma[i] > 0.0).collect();
        for &i in &keep {
            bases.push(svd.u.col(i));
        }
        lowrank.push(svd.reconstruct());
    }
    let u = Matrix::from_cols(r, &bases);
    let q = orthonormalize(&u)?;
    let mut coeff = Matrix::zeros(q.cols(), c);
    for lr in &lowrank {
        coeff.axpy(1.0, &q.matmul_at(lr)?)?;
    }
    Ok(q.matmul(&coeff)?.scale(s))
}

/// CART on updates: `mean(ΔW) + s · Σ LR_k(ΔW_i − mean(ΔW))`.
pub fn merge_cart_deltas(deltas: &[&Matrix], k: usize, s: f64) -> Result<Matrix> {
    let (r, c) = check_same_shape(deltas)?;
    let max = r.min(c);
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { rank: k, max });
    }
    let n = deltas.len() as f64;
    let mut mean = Matrix::zeros(r, c);
    for d in deltas {
        mean.axpy(1.0 / n, d)?;
    }
    let mut out = mean.clone();
    if s != 0.0 {
        for d in deltas {
            let centered = d.sub(&mean)?;
            if centered.max_abs() == 0.0 {
                continue;
            }
            let (b, a) = truncate_rank(&centered, k)?;
            out.axpy(s, &b.matmul(&a)?)?;
        }
    }
    Ok(out)
}

/// CART on full checkpoints; returns the merged update relative to `w0`:
/// `(W̄ − W₀) + s · Σ LR_k(W_i − W̄)`.
pub fn merge_cart(full_weights: &[&Matrix], k: usize, s: f64, w0: &Matrix) -> Result<Matrix> {
    if full_weights.len() < 2 {
        return Err(Error::config("CART needs at least two models"));
    }
    check_same_shape(full_weights)?;
    let deltas: Vec<Matrix> = full_weights.iter().map(|w| w.sub(w0)).collect::<Result<_>>()?;
    let refs: Vec<&Matrix> = deltas.iter().collect();
    merge_cart_deltas(&refs, k, s)
}

/// CART rank as a fraction of the smaller matrix dimension, at least 1.
pub fn cart_rank_for(fraction: f64, rows: usize, cols: usize) -> usize {
    ((fraction * rows.min(cols) as f64).round() as usize).clamp(1, rows.min(cols))
}

/// Default TSV per-task rank: the smaller dimension split across tasks.
pub fn tsv_rank_for(rows: usize, cols: usize, tasks: usize) -> usize {
    (rows.min(cols) / tasks.max(1)).max(1)
}

/// Applies an update-space operator (TA, TIES, TIES+DARE, TSV, CART) to the
/// per-task matrices of one layer. `stream_tag` keys the DARE masks.
pub fn aggregate(spec: &MergeSpec, mats: &[&Matrix], stream_tag: &str) -> Result<Matrix> {
    spec.validate()?;
    let (rows, cols) = check_same_shape(mats)?;
    let s = spec.coefficient;
    match spec.operator {
        Operator::Ta => merge_ta(mats, s),
        Operator::Ties => merge_ties(mats, spec.trim_keep, s),
        Operator::TiesDare => {
            let mut r = rng::stream(spec.seed, stream_tag, Purpose::DareMask);
            merge_dare(mats, spec.dare_keep, spec.dare_inner, spec.trim_keep, s, &mut r)
        }
        Operator::Tsv => {
            let rank = spec.tsv_rank.unwrap_or_else(|| tsv_rank_for(rows, cols, mats.len())).min(rows.min(cols));
            merge_tsv(mats, rank, s)
        }
        Operator::Cart => {
            let k = spec.cart_rank.unwrap_or_else(|| cart_rank_for(spec.cart_fraction, rows, cols)).min(rows.min(cols));
            merge_cart_deltas(mats, k, s)
        }
        Operator::Regmean | Operator::Com => Err(Error::config(format!(
            "{} needs proxy activations; use merge_models_regmean or merge_com",
            spec.operator.name()
        ))),
    }
}
