//! Dense feed-forward classifier with frozen base weights and LoRA insertion
//! points on the hidden-layer weight matrices.
//!
//! All derivatives are computed by hand-written backpropagation. With an
//! adapter at scale `s`, a targeted layer uses the effective weight
//! `W₀ + s·(α/r)·B·A`; biases are never adapted.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, Purpose, Rng};
use crate::tasks::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z`.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self { input_dim: 32, hidden_dims: vec![64, 64], num_classes: 8, activation: Activation::Relu }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.is_empty() {
            return Err(Error::config("backbone needs at least one hidden layer"));
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::config("backbone dimensions must be positive"));
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(d_out, d_in)` of every layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[1], w[0])).collect()
    }

    /// Indices of the hidden-layer weight matrices (the default LoRA targets).
    pub fn hidden_layer_indices(&self) -> Vec<usize> {
        (0..self.hidden_dims.len()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `d_out × d_in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub spec: BackboneSpec,
    pub layers: Vec<Layer>,
}

/// Loss and accuracy of a model on a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Eval {
    pub loss: f64,
    pub accuracy: f64,
}

/// Gradient with respect to every weight and bias; same layout as [`Weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrads {
    pub layers: Vec<Layer>,
}

impl WeightGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// One adapter-bearing layer with its loss gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorGrad {
    pub layer: usize,
    pub b: Matrix,
    pub a: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Wrt {
    LoraFactors,
    FullWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Grads {
    Lora(Vec<FactorGrad>),
    Full(WeightGrads),
}

impl Grads {
    pub fn frobenius_norm(&self) -> f64 {
        match self {
            Grads::Lora(g) => {
                g.iter().map(|f| f.b.frobenius_sq() + f.a.frobenius_sq()).sum::<f64>().sqrt()
            }
            Grads::Full(w) => w.frobenius_norm(),
        }
    }
}

impl Weights {
    /// He-normal (relu) or Glorot-normal (tanh) initialisation, zero biases.
    pub fn init(spec: &BackboneSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut r = rng::stream(seed, "backbone", Purpose::Init);
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(d_out, d_in)| {
                let std = match spec.activation {
                    Activation::Relu => (2.0 / d_in as f64).sqrt(),
                    Activation::Tanh => (2.0 / (d_in + d_out) as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                Layer {
                    weight: Matrix::from_fn(d_out, d_in, |_, _| normal.sample(&mut r)),
                    bias: vec![0.0; d_out],
                }
            })
            .collect();
        Ok(Self { spec: spec.clone(), layers })
    }

    /// All-zero weights of the given shape.
    pub fn zeros(spec: &BackboneSpec) -> Self {
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(o, i)| Layer { weight: Matrix::zeros(o, i), bias: vec![0.0; o] })
            .collect();
        Self { spec: spec.clone(), layers }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape(format!(
                "{} layers stored, spec implies {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (i, ((o, n), l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.weight.shape() != (*o, *n) || l.bias.len() != *o {
                return Err(Error::shape(format!("layer {i} does not match {o}x{n}")));
            }
        }
        Ok(())
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weight.as_slice().len();
            l.weight.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    /// `W₀ + s·ΔW` on the layers carried by `update`.
    pub fn with_update(&self, update: &UpdateSet, s: f64) -> Result<Weights> {
        let mut out = self.clone();
        for (&layer, delta) in &update.deltas {
            let target = out
                .layers
                .get_mut(layer)
                .ok_or_else(|| Error::shape(format!("update targets missing layer {layer}")))?;
            target.weight.axpy(s, delta)?;
        }
        Ok(out)
    }

    /// `W₀ + s·(self − W₀)` over every weight and bias.
    pub fn scaled_from(&self, base: &Weights, s: f64) -> Result<Weights> {
        if self.layers.len() != base.layers.len() {
            return Err(Error::shape("scaled_from with differing layer counts"));
        }
        let mut out = base.clone();
        for (o, (w, b)) in out.layers.iter_mut().zip(self.layers.iter().zip(&base.layers)) {
            let delta = w.weight.sub(&b.weight)?;
            o.weight.axpy(s, &delta)?;
            for ((ob, wb), bb) in o.bias.iter_mut().zip(&w.bias).zip(&b.bias) {
                *ob += s * (wb - bb);
            }
        }
        Ok(out)
    }

    /// Weight-matrix differences `self − base` on the listed layers.
    pub fn delta_from(&self, base: &Weights, layers: &[usize]) -> Result<UpdateSet> {
        let mut deltas = BTreeMap::new();
        for &l in layers {
            deltas.insert(l, self.layers[l].weight.sub(&base.layers[l].weight)?);
        }
        Ok(UpdateSet { deltas })
    }

    /// Pre-activation of every layer (the last one being the logits).
    pub fn forward_trace(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        if x.cols() != self.spec.input_dim {
            return Err(Error::shape(format!(
                "input has {} features, backbone expects {}",
                x.cols(),
                self.spec.input_dim
            )));
        }
        if x.rows() == 0 {
            return Err(Error::Empty("forward batch".into()));
        }
        let last = self.layers.len() - 1;
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = affine(&h, layer)?;
            if i < last {
                h = z.map(|v| self.spec.activation.apply(v));
            }
            pre.push(z);
        }
        Ok(pre)
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_trace(x)?.pop().expect("at least one layer"))
    }

    /// Hidden activations entering each layer (index 0 is the raw input).
    pub fn layer_inputs(&self, x: &Matrix) -> Result<Vec<Matrix>> {
        let pre = self.forward_trace(x)?;
        let mut inputs = vec![x.clone()];
        for z in &pre[..pre.len() - 1] {
            inputs.push(z.map(|v| self.spec.activation.apply(v)));
        }
        Ok(inputs)
    }

    pub fn evaluate(&self, data: &Dataset) -> Result<Eval> {
        let logits = self.logits(&data.x)?;
        let (loss, _) = cross_entropy(&logits, &data.y, false)?;
        let correct = data
            .y
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(logits.row(*i)) == y)
            .count();
        Ok(Eval { loss, accuracy: correct as f64 / data.len() as f64 })
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate(data)?.accuracy)
    }

    /// Mean cross-entropy and its gradient with respect to every parameter.
    pub fn loss_and_grad(&self, batch: &Dataset) -> Result<(f64, WeightGrads)> {
        let (loss, grads, _) = backprop(self, &[], batch, None)?;
        Ok((loss, grads))
    }
}

fn affine(h: &Matrix, layer: &Layer) -> Result<Matrix> {
    let mut z = h.matmul_bt(&layer.weight)?;
    for r in 0..z.rows() {
        for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
            *v += b;
        }
    }
    Ok(z)
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut p = logits.clone();
    for r in 0..p.rows() {
        let row = p.row_mut(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    p
}

/// Mean cross-entropy via log-sum-exp; optionally returns `∂loss/∂logits`.
fn cross_entropy(logits: &Matrix, labels: &[usize], want_grad: bool) -> Result<(f64, Option<Matrix>)> {
    let n = logits.rows();
    let c = logits.cols();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} logit rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::Empty("loss batch".into()));
    }
    let mut grad = if want_grad { Some(Matrix::zeros(n, c)) } else { None };
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::shape(format!("label {y} out of range for {c} classes")));
        }
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[y];
        if let Some(g) = grad.as_mut() {
            let g_row = g.row_mut(r);
            for (k, (gv, &v)) in g_row.iter_mut().zip(row).enumerate() {
                let p = (v - lse).exp();
                *gv = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
            }
        }
    }
    let loss = total / n as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross-entropy loss".into()));
    }
    Ok((loss, grad))
}

/// Explicit low-rank branch added to a layer's pre-activation, used when LoRA
/// dropout is active (the branch input differs from the base input).
struct Branch<'a> {
    layer: usize,
    b: &'a Matrix,
    a: &'a Matrix,
    coef: f64,
    keep: f64,
}

/// Forward and backward pass. `weights` holds the weights applied to the
/// un-dropped input; `branches` adds `coef · B A (mask ⊙ h / keep)` terms.
fn backprop(
    weights: &Weights,
    branches: &[Branch<'_>],
    batch: &Dataset,
    mut dropout: Option<&mut Rng>,
) -> Result<(f64, WeightGrads, Vec<FactorGrad>)> {
    let act = weights.spec.activation;
    let n_layers = weights.layers.len();
    if batch.x.cols() != weights.spec.input_dim {
        return Err(Error::shape(format!(
            "batch has {} features, backbone expects {}",
            batch.x.cols(),
            weights.spec.input_dim
        )));
    }
    if batch.is_empty() {
        return Err(Error::Empty("training batch".into()));
    }

    // inputs[l] enters layer l; pre[l] is its pre-activation.
    let mut inputs: Vec<Matrix> = Vec::with_capacity(n_layers);
    let mut pre: Vec<Matrix> = Vec::with_capacity(n_layers);
    // Per branch: (dropped input D, D·Aᵀ, mask).
    let mut branch_cache: Vec<(Matrix, Matrix, Option<Matrix>)> = Vec::with_capacity(branches.len());
    let mut h = batch.x.clone();
    for (l, layer) in weights.layers.iter().enumerate() {
        let mut z = affine(&h, layer)?;
        for br in branches.iter().filter(|b| b.layer == l) {
            let (d, mask) = if br.keep < 1.0 {
                let r = dropout.as_deref_mut().expect("dropout rng");
                let mask = Matrix::from_fn(h.rows(), h.cols(), |_, _| {
                    if r.random_bool(br.keep) {
                        1.0 / br.keep
                    } else {
                        0.0
                    }
                });
                (h.hadamard(&mask)?, Some(mask))
            } else {
                (h.clone(), None)
            };
            let t = d.matmul_bt(br.a)?;
            let bt = t.matmul_bt(br.b)?;
            z.axpy(br.coef, &bt)?;
            branch_cache.push((d, t, mask));
        }
        inputs.push(h);
        if l + 1 < n_layers {
            h = z.map(|v| act.apply(v));
        } else {
            h = Matrix::zeros(0, 0);
        }
        pre.push(z);
    }

    let (loss, grad) = cross_entropy(&pre[n_layers - 1], &batch.y, true)?;
    let mut dz = grad.expect("gradient requested");

    let mut grads: Vec<Layer> = Vec::with_capacity(n_layers);
    let mut factor_grads: Vec<FactorGrad> = Vec::new();
    for l in (0..n_layers).rev() {
        let layer = &weights.layers[l];
        let gw = dz.matmul_at(&inputs[l])?;
        let mut gb = vec![0.0; layer.bias.len()];
        for r in 0..dz.rows() {
            for (g, v) in gb.iter_mut().zip(dz.row(r)) {
                *g += v;
            }
        }
        let mut dh = if l > 0 { Some(dz.matmul(&layer.weight)?) } else { None };
        for (bi, br) in branches.iter().enumerate().filter(|(_, b)| b.layer == l) {
            let (d, t, mask) = &branch_cache[bi];
            let db = dz.matmul_at(t)?.scale(br.coef);
            let dt = dz.matmul(br.b)?.scale(br.coef);
            let da = dt.matmul_at(d)?;
            if let Some(dh) = dh.as_mut() {
                let mut dd = dt.matmul(br.a)?;
                if let Some(m) = mask {
                    dd = dd.hadamard(m)?;
                }
                dh.axpy(1.0, &dd)?;
            }
            factor_grads.push(FactorGrad { layer: l, b: db, a: da });
        }
        grads.push(Layer { weight: gw, bias: gb });
        if let Some(dh) = dh {
            let zprev = &pre[l - 1];
            let mut next = dh;
            for (g, &z) in next.as_mut_slice().iter_mut().zip(zprev.as_slice()) {
                *g *= act.derivative(z);
            }
            dz = next;
        }
    }
    grads.reverse();
    factor_grads.reverse();
    let wg = WeightGrads { layers: grads };
    if !wg.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite())) {
        return Err(Error::NonFinite("gradient".into()));
    }
    Ok((loss, wg, factor_grads))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct AdapterMeta {
    pub task_id: String,
    pub seed: u64,
    /// `"none"`, `"trap2"`, or the name of a post-hoc transform.
    pub protection: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub layer: usize,
    /// `d_out × r`.
    pub b: Matrix,
    /// `r × d_in`.
    pub a: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
    pub meta: AdapterMeta,
}

impl LoraAdapter {
    /// Standard LoRA initialisation: `A ~ U(−1/√d_in, 1/√d_in)`, `B = 0`.
    pub fn init(
        spec: &BackboneSpec,
        targets: &[usize],
        rank: usize,
        alpha: f64,
        meta: AdapterMeta,
    ) -> Result<Self> {
        let shapes = spec.layer_shapes();
        let mut r = rng::stream(meta.seed, &meta.task_id, Purpose::Init);
        let mut layers = Vec::with_capacity(targets.len());
        for &t in targets {
            let &(d_out, d_in) =
                shapes.get(t).ok_or_else(|| Error::config(format!("no layer {t} to adapt")))?;
            if rank == 0 || rank > d_out.min(d_in) {
                return Err(Error::RankOutOfRange { rank, max: d_out.min(d_in) });
            }
            let bound = 1.0 / (d_in as f64).sqrt();
            layers.push(LoraLayer {
                layer: t,
                b: Matrix::zeros(d_out, rank),
                a: Matrix::from_fn(rank, d_in, |_, _| r.random_range(-bound..bound)),
            });
        }
        Ok(Self { rank, alpha, layers, meta })
    }

    /// Multiplier `α / r` applied to `B·A`.
    pub fn nominal_scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn target_layers(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer).collect()
    }

    pub fn validate(&self, spec: &BackboneSpec) -> Result<()> {
        let shapes = spec.layer_shapes();
        for l in &self.layers {
            let &(d_out, d_in) =
                shapes.get(l.layer).ok_or_else(|| Error::shape(format!("adapter targets layer {}", l.layer)))?;
            if l.b.shape() != (d_out, self.rank) || l.a.shape() != (self.rank, d_in) {
                return Err(Error::shape(format!(
                    "adapter layer {}: B {:?}, A {:?} incompatible with {d_out}x{d_in} at rank {}",
                    l.layer,
                    l.b.shape(),
                    l.a.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// `ΔW_l = (α/r)·B_l·A_l` for every target layer.
    pub fn materialize(&self) -> Result<UpdateSet> {
        let c = self.nominal_scale();
        let mut deltas = BTreeMap::new();
        for l in &self.layers {
            if l.b.cols() != l.a.rows() {
                return Err(Error::shape(format!("layer {}: B and A ranks differ", l.layer)));
            }
            let mut d = l.b.matmul(&l.a)?;
            if c != 1.0 {
                d.scale_in_place(c);
            }
            deltas.insert(l.layer, d);
        }
        Ok(UpdateSet { deltas })
    }

    /// `(α/r)·B·A` for the adapter layer at position `pos`.
    pub fn materialize_layer(&self, pos: usize) -> Result<Matrix> {
        let l = &self.layers[pos];
        Ok(l.b.matmul(&l.a)?.scale(self.nominal_scale()))
    }

    pub fn param_len(&self) -> usize {
        self.layers.iter().map(|l| l.b.as_slice().len() + l.a.as_slice().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for l in &self.layers {
            out.extend_from_slice(l.b.as_slice());
            out.extend_from_slice(l.a.as_slice());
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            let nb = l.b.as_slice().len();
            l.b.as_mut_slice().copy_from_slice(&flat[off..off + nb]);
            off += nb;
            let na = l.a.as_slice().len();
            l.a.as_mut_slice().copy_from_slice(&flat[off..off + na]);
            off += na;
        }
    }
}

/// Flattens factor gradients in the same order as [`LoraAdapter::flatten`].
pub fn flatten_factor_grads(grads: &[FactorGrad]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(g.b.as_slice());
        out.extend_from_slice(g.a.as_slice());
    }
    out
}

/// Materialised per-layer weight updates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateSet {
    pub deltas: BTreeMap<usize, Matrix>,
}

impl UpdateSet {
    pub fn layers(&self) -> Vec<usize> {
        self.deltas.keys().copied().collect()
    }

    pub fn scale(&self, s: f64) -> UpdateSet {
        UpdateSet { deltas: self.deltas.iter().map(|(&l, d)| (l, d.scale(s))).collect() }
    }

    fn zip_with(&self, other: &UpdateSet, f: impl Fn(&Matrix, &Matrix) -> Result<Matrix>) -> Result<UpdateSet> {
        if self.layers() != other.layers() {
            return Err(Error::shape("update sets target different layers"));
        }
        let mut deltas = BTreeMap::new();
        for (l, d) in &self.deltas {
            deltas.insert(*l, f(d, &other.deltas[l])?);
        }
        Ok(UpdateSet { deltas })
    }

    pub fn add(&self, other: &UpdateSet) -> Result<UpdateSet> {
        self.zip_with(other, |a, b| a.add(b))
    }

    pub fn sub(&self, other: &UpdateSet) -> Result<UpdateSet> {
        self.zip_with(other, |a, b| a.sub(b))
    }

    /// `self + beta · (other − self)`.
    pub fn lerp(&self, other: &UpdateSet, beta: f64) -> Result<UpdateSet> {
        self.zip_with(other, |a, b| {
            let mut out = a.clone();
            out.axpy(beta, &b.sub(a)?)?;
            Ok(out)
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.deltas.values().map(Matrix::frobenius_sq).sum::<f64>().sqrt()
    }

    pub fn inner(&self, other: &UpdateSet) -> Result<f64> {
        if self.layers() != other.layers() {
            return Err(Error::shape("update sets target different layers"));
        }
        self.deltas.iter().map(|(l, d)| d.inner(&other.deltas[l])).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.deltas.values().flat_map(|d| d.as_slice().iter().copied()).collect()
    }

    pub fn max_abs_diff(&self, other: &UpdateSet) -> Result<f64> {
        Ok(self.sub(other)?.deltas.values().map(Matrix::max_abs).fold(0.0, f64::max))
    }
}

/// Logits of `w0 + s·update` on `x`; `update = None` is the base model.
pub fn forward(w0: &Weights, update: Option<&UpdateSet>, s: f64, x: &Matrix) -> Result<Matrix> {
    match update {
        Some(u) if s != 0.0 => w0.with_update(u, s)?.logits(x),
        _ => w0.logits(x),
    }
}

/// Loss and accuracy of `w0 + s·update` on `data`.
pub fn evaluate(w0: &Weights, update: Option<&UpdateSet>, s: f64, data: &Dataset) -> Result<Eval> {
    match update {
        Some(u) if s != 0.0 => w0.with_update(u, s)?.evaluate(data),
        _ => w0.evaluate(data),
    }
}

/// Mean cross-entropy of `w0 + s·(α/r)·B·A` on `batch` and its exact gradient,
/// either with respect to the LoRA factors or to every effective weight.
pub fn loss_and_grad(
    w0: &Weights,
    adapter: &LoraAdapter,
    s: f64,
    batch: &Dataset,
    wrt: Wrt,
) -> Result<(f64, Grads)> {
    adapter.validate(&w0.spec)?;
    let update = adapter.materialize()?;
    let eff = w0.with_update(&update, s)?;
    let (loss, grads, _) = backprop(&eff, &[], batch, None)?;
    match wrt {
        Wrt::FullWeights => Ok((loss, Grads::Full(grads))),
        Wrt::LoraFactors => Ok((loss, Grads::Lora(factor_grads_from(&grads, adapter, s)?))),
    }
}

/// Chain rule through `W = W₀ + c·B·A` with `c = s·α/r`.
fn factor_grads_from(grads: &WeightGrads, adapter: &LoraAdapter, s: f64) -> Result<Vec<FactorGrad>> {
    let c = s * adapter.nominal_scale();
    adapter
        .layers
        .iter()
        .map(|l| {
            let g = &grads.layers[l.layer].weight;
            Ok(FactorGrad {
                layer: l.layer,
                b: g.matmul_bt(&l.a)?.scale(c),
                a: l.b.matmul_at(g)?.scale(c),
            })
        })
        .collect()
}

/// Factor gradient with LoRA dropout on the branch input. With
/// `keep_prob == 1` this equals [`loss_and_grad`] with [`Wrt::LoraFactors`].
pub fn loss_and_factor_grad_dropout(
    w0: &Weights,
    adapter: &LoraAdapter,
    s: f64,
    batch: &Dataset,
    keep_prob: f64,
    r: &mut Rng,
) -> Result<(f64, Vec<FactorGrad>)> {
    if keep_prob >= 1.0 {
        let (loss, g) = loss_and_grad(w0, adapter, s, batch, Wrt::LoraFactors)?;
        let Grads::Lora(g) = g else { unreachable!() };
        return Ok((loss, g));
    }
    adapter.validate(&w0.spec)?;
    let coef = s * adapter.nominal_scale();
    let branches: Vec<Branch<'_>> = adapter
        .layers
        .iter()
        .map(|l| Branch { layer: l.layer, b: &l.b, a: &l.a, coef, keep: keep_prob })
        .collect();
    let (loss, _, fg) = backprop(w0, &branches, batch, Some(r))?;
    Ok((loss, fg))
}
