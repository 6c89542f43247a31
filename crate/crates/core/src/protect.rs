//! Post-hoc protection baselines applied to a released adapter.
//!
//! ★ variants transform the materialised adapter update and refactor it at
//! the adapter's rank. † variants transform the full fine-tuned weights
//! `W₀ + ΔW` and refit a rank-`r` adapter to the transformed difference.
//!
//! Row rescaling groups rows into contiguous blocks sharing one factor. The
//! RPD transform pairs two consecutive hidden layers; on this dense backbone
//! the activation between them means neither variant preserves the function.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{LoraAdapter, LoraLayer, Weights};
use crate::error::{Error, Result};
use crate::linalg::{inverse, truncate_rank, Matrix};
use crate::rng::{self, Purpose, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtectKind {
    DiagRescaleStar,
    RpdStar,
    DiagRescaleRefit,
    RpdRefit,
}

impl ProtectKind {
    pub const ALL: [ProtectKind; 4] =
        [ProtectKind::DiagRescaleStar, ProtectKind::RpdStar, ProtectKind::DiagRescaleRefit, ProtectKind::RpdRefit];

    pub fn name(self) -> &'static str {
        match self {
            ProtectKind::DiagRescaleStar => "diag_rescale_star",
            ProtectKind::RpdStar => "rpd_star",
            ProtectKind::DiagRescaleRefit => "diag_rescale_refit",
            ProtectKind::RpdRefit => "rpd_refit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ProtectKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown protection {s:?}")))
    }

    pub fn is_refit(self) -> bool {
        matches!(self, ProtectKind::DiagRescaleRefit | ProtectKind::RpdRefit)
    }

    fn is_rpd(self) -> bool {
        matches!(self, ProtectKind::RpdStar | ProtectKind::RpdRefit)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectTransform {
    pub kind: ProtectKind,
    pub scale_range: (f64, f64),
    pub log_std: f64,
    pub clip_floor: f64,
    pub block_size: usize,
    /// Layers `(l, l+1)` receiving `T` and `T⁻¹`.
    pub pair: (usize, usize),
    pub seed: u64,
    /// Forces `R = P = D = I` (testing aid).
    #[serde(default)]
    pub identity_override: bool,
}

impl ProtectTransform {
    pub fn new(kind: ProtectKind, seed: u64) -> Self {
        Self {
            kind,
            scale_range: (0.5, 1.5),
            log_std: 0.2,
            clip_floor: 1e-4,
            block_size: 8,
            pair: (0, 1),
            seed,
            identity_override: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo <= hi) || !(lo > 0.0) {
            return Err(Error::config(format!("scale_range must satisfy 0 < low <= high, got {:?}", self.scale_range)));
        }
        if !(self.clip_floor > 0.0) || !(self.log_std >= 0.0) {
            return Err(Error::config("clip_floor must be positive and log_std nonnegative"));
        }
        if self.block_size == 0 {
            return Err(Error::config("block_size must be positive"));
        }
        if self.pair.1 != self.pair.0 + 1 {
            return Err(Error::config("rpd pair must be two consecutive layers"));
        }
        Ok(())
    }

    /// One factor per contiguous row block of a `rows`-row matrix, expanded
    /// to one factor per row.
    pub fn row_factors(&self, rows: usize, r: &mut Rng) -> Vec<f64> {
        let (lo, hi) = self.scale_range;
        let blocks = rows.div_ceil(self.block_size);
        let per_block: Vec<f64> =
            (0..blocks).map(|_| if lo == hi { lo } else { r.random_range(lo..hi) }).collect();
        (0..rows).map(|i| per_block[i / self.block_size]).collect()
    }

    /// `T = R·P·D` and its inverse for dimension `d`.
    pub fn rpd(&self, d: usize, r: &mut Rng) -> Result<(Matrix, Matrix)> {
        if self.identity_override {
            return Ok((Matrix::identity(d), Matrix::identity(d)));
        }
        let rm = Matrix::from_fn(d, d, |_, _| StandardNormal.sample(r));
        let mut perm: Vec<usize> = (0..d).collect();
        perm.shuffle(r);
        let pm = Matrix::from_fn(d, d, |i, j| if perm[i] == j { 1.0 } else { 0.0 });
        let normal = Normal::new(0.0, self.log_std).map_err(|e| Error::config(e.to_string()))?;
        let diag: Vec<f64> = (0..d).map(|_| f64::exp(normal.sample(r)).max(self.clip_floor)).collect();
        let t = rm.matmul(&pm)?.matmul(&Matrix::diag(&diag))?;
        let t_inv = inverse(&t)?;
        Ok((t, t_inv))
    }
}

fn row_scaled(m: &Matrix, factors: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] * factors[i])
}

/// Transforms the per-layer matrices in `mats` (keyed by layer) in place:
/// row-block rescaling, or `T·M_l` and `M_{l+1}·T⁻¹` for the RPD pair.
fn apply_transform(mats: &mut BTreeMap<usize, Matrix>, t: &ProtectTransform) -> Result<()> {
    let mut r = rng::stream(t.seed, t.kind.name(), Purpose::Protect);
    if t.kind.is_rpd() {
        let (l0, l1) = t.pair;
        let (Some(m0), Some(m1)) = (mats.get(&l0), mats.get(&l1)) else {
            return Err(Error::config(format!("rpd needs both layers {l0} and {l1}")));
        };
        let d = m0.rows();
        if m1.cols() != d {
            return Err(Error::shape(format!("rpd pair dims {} and {} differ", d, m1.cols())));
        }
        let (tm, t_inv) = t.rpd(d, &mut r)?;
        let err = tm.matmul(&t_inv)?.sub(&Matrix::identity(d))?.max_abs();
        if err > 1e-6 {
            return Err(Error::Singular(format!("rpd transform inverse error {err:e}")));
        }
        let new0 = tm.matmul(m0)?;
        let new1 = m1.matmul(&t_inv)?;
        mats.insert(l0, new0);
        mats.insert(l1, new1);
    } else {
        for m in mats.values_mut() {
            let f = t.row_factors(m.rows(), &mut r);
            *m = row_scaled(m, &f);
        }
    }
    Ok(())
}

fn refactor(adapter: &LoraAdapter, deltas: &BTreeMap<usize, Matrix>, rank: usize) -> Result<(Vec<LoraLayer>, Vec<f64>)> {
    let c = adapter.alpha / rank as f64;
    let mut layers = Vec::with_capacity(deltas.len());
    let mut residuals = Vec::with_capacity(deltas.len());
    for (&layer, d) in deltas {
        let (b, a) = truncate_rank(d, rank)?;
        let b = b.scale(1.0 / c);
        residuals.push(b.matmul(&a)?.scale(c).sub(d)?.frobenius_norm());
        layers.push(LoraLayer { layer, b, a });
    }
    Ok((layers, residuals))
}

/// ★ variant: transform the materialised update and refactor at the same rank.
pub fn protect_star(adapter: &LoraAdapter, t: &ProtectTransform) -> Result<LoraAdapter> {
    t.validate()?;
    if t.kind.is_refit() {
        return Err(Error::config(format!("{} is a refit transform", t.kind.name())));
    }
    let mut deltas = adapter.materialize()?.deltas;
    apply_transform(&mut deltas, t)?;
    let (layers, _) = refactor(adapter, &deltas, adapter.rank)?;
    let mut out = adapter.clone();
    out.layers = layers;
    out.meta.protection = t.kind.name().into();
    Ok(out)
}

/// Transformed full weights `W'_l` of the adapted layers of `W₀ + ΔW`.
pub fn transform_full(w0: &Weights, adapter: &LoraAdapter, t: &ProtectTransform) -> Result<BTreeMap<usize, Matrix>> {
    t.validate()?;
    let update = adapter.materialize()?;
    let mut full = BTreeMap::new();
    for (&l, d) in &update.deltas {
        full.insert(l, w0.layers[l].weight.add(d)?);
    }
    apply_transform(&mut full, t)?;
    Ok(full)
}

/// † variant: transform `W₀ + ΔW`, then refit a rank-`rank` adapter to
/// `W' − W₀`. Returns the adapter and each layer's Frobenius refit residual.
pub fn protect_refit(w0: &Weights, adapter: &LoraAdapter, t: &ProtectTransform, rank: usize) -> Result<(LoraAdapter, Vec<f64>)> {
    if !t.kind.is_refit() {
        return Err(Error::config(format!("{} is not a refit transform", t.kind.name())));
    }
    adapter.validate(&w0.spec)?;
    let mut deltas = transform_full(w0, adapter, t)?;
    for (l, m) in deltas.iter_mut() {
        *m = m.sub(&w0.layers[*l].weight)?;
    }
    let (layers, residuals) = refactor(adapter, &deltas, rank)?;
    let mut out = adapter.clone();
    out.rank = rank;
    out.layers = layers;
    out.meta.protection = t.kind.name().into();
    Ok((out, residuals))
}

/// Dispatches to [`protect_star`] or [`protect_refit`] at the adapter's rank.
pub fn protect(w0: &Weights, adapter: &LoraAdapter, t: &ProtectTransform) -> Result<LoraAdapter> {
    if t.kind.is_refit() {
        Ok(protect_refit(w0, adapter, t, adapter.rank)?.0)
    } else {
        protect_star(adapter, t)
    }
}
