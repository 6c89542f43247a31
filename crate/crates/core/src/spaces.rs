//! Merging spaces: materialised updates (Full), a shared right subspace of
//! the concatenated updates (KnOTS), and a shared bi-subspace of the stacked
//! LoRA factors (Core).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{LoraAdapter, UpdateSet};
use crate::error::{Error, Result};
use crate::linalg::{svd_thin, Matrix};
use crate::mergeops::{aggregate, MergeSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Space {
    #[default]
    Full,
    Knots,
    Core,
}

impl Space {
    pub const ALL: [Space; 3] = [Space::Full, Space::Knots, Space::Core];

    pub fn name(self) -> &'static str {
        match self {
            Space::Full => "full",
            Space::Knots => "knots",
            Space::Core => "core",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Space::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown merging space {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SpaceConfig {
    pub space: Space,
    /// Shared basis rank; `None` is the sum of adapter ranks capped at the
    /// feasible rank of the stacked construction.
    #[serde(default)]
    pub k: Option<usize>,
}

impl SpaceConfig {
    pub fn new(space: Space) -> Self {
        Self { space, k: None }
    }
}

/// Per-task right blocks `V_i` (`d_in × k`) of the SVD of `[ΔW_1 … ΔW_N]`
/// together with the shared `UΣ` (`d_out × k`).
#[derive(Debug, Clone)]
pub struct KnotsRepr {
    pub u_sigma: Matrix,
    pub blocks: Vec<Matrix>,
}

pub fn knots_representation(deltas: &[&Matrix], k: usize) -> Result<KnotsRepr> {
    let first = deltas.first().ok_or_else(|| Error::Empty("KnOTS input list".into()))?;
    let (d_out, d_in) = first.shape();
    let p = Matrix::hstack(deltas)?;
    let max = d_out.min(p.cols());
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { rank: k, max });
    }
    let svd = svd_thin(&p, k)?;
    let u_sigma = Matrix::from_fn(d_out, k, |i, j| svd.u[(i, j)] * svd.sigma[j]);
    let blocks = (0..deltas.len()).map(|i| svd.v.row_block(i * d_in, d_in)).collect();
    Ok(KnotsRepr { u_sigma, blocks })
}

/// Shared bases `U_B` (`d_out × k`), `V_A` (`d_in × k`) and per-task cores
/// `M_i = U_Bᵀ (c·B_i) A_i V_A` (`k × k`).
#[derive(Debug, Clone)]
pub struct CoreRepr {
    pub u_b: Matrix,
    pub v_a: Matrix,
    pub cores: Vec<Matrix>,
}

/// `factors[i] = (c_i·B_i, A_i)` for one layer.
pub fn core_representation(factors: &[(Matrix, &Matrix)], k: usize) -> Result<CoreRepr> {
    let first = factors.first().ok_or_else(|| Error::Empty("Core input list".into()))?;
    let (d_out, d_in) = (first.0.rows(), first.1.cols());
    let bs: Vec<&Matrix> = factors.iter().map(|f| &f.0).collect();
    let as_: Vec<&Matrix> = factors.iter().map(|f| f.1).collect();
    let b_stack = Matrix::hstack(&bs)?;
    let a_stack = Matrix::vstack(&as_)?;
    let max = d_out.min(d_in).min(b_stack.cols());
    if k == 0 || k > max {
        return Err(Error::RankOutOfRange { rank: k, max });
    }
    let u_b = svd_thin(&b_stack, k)?.u;
    let v_a = svd_thin(&a_stack, k)?.v;
    let cores = factors
        .iter()
        .map(|(b, a)| u_b.matmul_at(b)?.matmul(&a.matmul(&v_a)?))
        .collect::<Result<_>>()?;
    Ok(CoreRepr { u_b, v_a, cores })
}

fn check_adapters(adapters: &[&LoraAdapter]) -> Result<Vec<usize>> {
    let first = adapters.first().ok_or_else(|| Error::Empty("adapter list".into()))?;
    let layers = first.target_layers();
    for a in adapters {
        if a.target_layers() != layers {
            return Err(Error::shape("adapters target different layers"));
        }
        for (x, y) in a.layers.iter().zip(&first.layers) {
            if x.b.rows() != y.b.rows() || x.a.cols() != y.a.cols() {
                return Err(Error::shape(format!("adapters disagree on the shape of layer {}", x.layer)));
            }
        }
    }
    Ok(layers)
}

fn default_k(adapters: &[&LoraAdapter], feasible: usize) -> usize {
    adapters.iter().map(|a| a.rank).sum::<usize>().min(feasible).max(1)
}

/// Merges adapters with `spec` in the chosen space.
pub fn merge_in_space(adapters: &[&LoraAdapter], spec: &MergeSpec, space: &SpaceConfig) -> Result<UpdateSet> {
    let layers = check_adapters(adapters)?;
    if space.space == Space::Full {
        let updates: Vec<UpdateSet> = adapters.iter().map(|a| a.materialize()).collect::<Result<_>>()?;
        let refs: Vec<&UpdateSet> = updates.iter().collect();
        return merge_updates(&refs, spec);
    }
    let mut deltas = BTreeMap::new();
    for (pos, &layer) in layers.iter().enumerate() {
        let tag = format!("layer{layer}");
        let merged = match space.space {
            Space::Knots => {
                let mats: Vec<Matrix> =
                    adapters.iter().map(|a| a.materialize_layer(pos)).collect::<Result<_>>()?;
                let refs: Vec<&Matrix> = mats.iter().collect();
                let (d_out, d_in) = mats[0].shape();
                let k = space.k.unwrap_or_else(|| default_k(adapters, d_out.min(d_in * mats.len())));
                let repr = knots_representation(&refs, k)?;
                let blocks: Vec<&Matrix> = repr.blocks.iter().collect();
                let v = aggregate(spec, &blocks, &tag)?;
                repr.u_sigma.matmul_bt(&v)?
            }
            Space::Core => {
                let factors: Vec<(Matrix, &Matrix)> = adapters
                    .iter()
                    .map(|a| (a.layers[pos].b.scale(a.nominal_scale()), &a.layers[pos].a))
                    .collect();
                let (d_out, d_in) = (factors[0].0.rows(), factors[0].1.cols());
                let stacked: usize = adapters.iter().map(|a| a.rank).sum();
                let k = space.k.unwrap_or_else(|| default_k(adapters, d_out.min(d_in).min(stacked)));
                let repr = core_representation(&factors, k)?;
                let cores: Vec<&Matrix> = repr.cores.iter().collect();
                let m = aggregate(spec, &cores, &tag)?;
                repr.u_b.matmul(&m)?.matmul_bt(&repr.v_a)?
            }
            Space::Full => unreachable!(),
        };
        deltas.insert(layer, merged);
    }
    Ok(UpdateSet { deltas })
}

/// Full-space merge of materialised updates, layer by layer.
pub fn merge_updates(updates: &[&UpdateSet], spec: &MergeSpec) -> Result<UpdateSet> {
    let first = updates.first().ok_or_else(|| Error::Empty("update list".into()))?;
    let layers = first.layers();
    if updates.iter().any(|u| u.layers() != layers) {
        return Err(Error::shape("updates target different layers"));
    }
    let mut deltas = BTreeMap::new();
    for l in layers {
        let mats: Vec<&Matrix> = updates.iter().map(|u| &u.deltas[&l]).collect();
        deltas.insert(l, aggregate(spec, &mats, &format!("layer{l}"))?);
    }
    Ok(UpdateSet { deltas })
}
