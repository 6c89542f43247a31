use crate::backbone::{Layer, Weights};
use crate::error::{Error, Result};
use crate::linalg::{solve_ridge, Matrix};

/// `XᵀX` for a batch `X` holding one sample per row.
pub fn gram(x: &Matrix) -> Matrix {
    x.matmul_at(x).expect("gram of a matrix with itself")
}

/// Per-layer, per-task Gram matrices of layer inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct GramStats {
    /// `grams[layer][task]`, each `d_in × d_in`.
    pub grams: Vec<Vec<Matrix>>,
    pub counts: Vec<usize>,
}

impl GramStats {
    /// Statistics of every model's own activations on its proxy batch.
    pub fn from_models(models: &[&Weights], proxies: &[&Matrix]) -> Result<Self> {
        if models.len() != proxies.len() {
            return Err(Error::shape(format!("{} models but {} proxy batches", models.len(), proxies.len())));
        }
        let n_layers = models.first().ok_or_else(|| Error::Empty("model list".into()))?.layers.len();
        let mut grams = vec![Vec::with_capacity(models.len()); n_layers];
        for (m, x) in models.iter().zip(proxies) {
            for (l, input) in m.layer_inputs(x)?.iter().enumerate() {
                grams[l].push(gram(input));
            }
        }
        Ok(Self { grams, counts: proxies.iter().map(|x| x.rows()).collect() })
    }
}

fn all_identical(ms: &[&Matrix]) -> bool {
    ms.windows(2).all(|w| w[0] == w[1])
}

/// RegMean closed form `(Σ W_i G_i)(Σ G_i + ridge·I)⁻¹`; `ridge = None`
/// uses `1e-6 · trace(Σ G_i) / dim`.
pub fn merge_regmean(weights: &[&Matrix], grams: &[&Matrix], ridge: Option<f64>) -> Result<Matrix> {
    let first = weights.first().ok_or_else(|| Error::Empty("RegMean weight list".into()))?;
    if weights.len() != grams.len() {
        return Err(Error::shape(format!("{} weights but {} Gram matrices", weights.len(), grams.len())));
    }
    let d = first.cols();
    for (w, g) in weights.iter().zip(grams) {
        if w.shape() != first.shape() {
            return Err(Error::shape("RegMean weights differ in shape"));
        }
        if g.shape() != (d, d) {
            return Err(Error::shape(format!("Gram is {:?}, layer input dim is {d}", g.shape())));
        }
    }
    if all_identical(weights) {
        return Ok((*first).clone());
    }
    let mut sum_g = Matrix::zeros(d, d);
    let mut rhs = Matrix::zeros(first.rows(), d);
    for (w, g) in weights.iter().zip(grams) {
        sum_g.axpy(1.0, g)?;
        rhs.axpy(1.0, &w.matmul(g)?)?;
    }
    let ridge = ridge.unwrap_or(1e-6 * sum_g.trace() / d as f64);
    solve_ridge(&sum_g, &rhs, ridge)
}

fn mean_bias(biases: &[&[f64]]) -> Vec<f64> {
    if biases.windows(2).all(|w| w[0] == w[1]) {
        return biases[0].to_vec();
    }
    let n = biases.len() as f64;
    (0..biases[0].len()).map(|j| biases.iter().map(|b| b[j]).sum::<f64>() / n).collect()
}

fn check_models(models: &[&Weights], proxies: &[&Matrix]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::Empty("model list".into()))?;
    if models.len() != proxies.len() {
        return Err(Error::shape(format!("{} models but {} proxy batches", models.len(), proxies.len())));
    }
    if models.iter().any(|m| m.spec != first.spec) {
        return Err(Error::shape("models have different architectures"));
    }
    if proxies.iter().any(|x| x.rows() == 0) {
        return Err(Error::Empty("proxy batch".into()));
    }
    Ok(())
}

fn merge_layer(models: &[&Weights], l: usize, grams: &[Matrix], ridge: Option<f64>) -> Result<Layer> {
    let ws: Vec<&Matrix> = models.iter().map(|m| &m.layers[l].weight).collect();
    let gs: Vec<&Matrix> = grams.iter().collect();
    let bs: Vec<&[f64]> = models.iter().map(|m| m.layers[l].bias.as_slice()).collect();
    Ok(Layer { weight: merge_regmean(&ws, &gs, ridge)?, bias: mean_bias(&bs) })
}

/// Layer-wise RegMean where each model's Gram comes from its own
/// activations on its proxy batch. Biases are averaged.
pub fn merge_models_regmean(models: &[&Weights], proxies: &[&Matrix], ridge: Option<f64>) -> Result<Weights> {
    check_models(models, proxies)?;
    let stats = GramStats::from_models(models, proxies)?;
    let mut out = models[0].clone();
    for l in 0..out.layers.len() {
        out.layers[l] = merge_layer(models, l, &stats.grams[l], ridge)?;
    }
    Ok(out)
}

/// Chain of merges: layers merged in order, with layer inputs recomputed
/// through the partially merged prefix before each RegMean step.
pub fn merge_com(models: &[&Weights], proxies: &[&Matrix], ridge: Option<f64>) -> Result<Weights> {
    check_models(models, proxies)?;
    let act = models[0].spec.activation;
    let n_layers = models[0].layers.len();
    let mut out = models[0].clone();
    let mut inputs: Vec<Matrix> = proxies.iter().map(|x| (*x).clone()).collect();
    for l in 0..n_layers {
        let grams: Vec<Matrix> = inputs.iter().map(gram).collect();
        out.layers[l] = merge_layer(models, l, &grams, ridge)?;
        if l + 1 < n_layers {
            let merged = &out.layers[l];
            inputs = inputs
                .iter()
                .map(|x| {
                    let mut z = x.matmul_bt(&merged.weight)?;
                    for r in 0..z.rows() {
                        for (v, b) in z.row_mut(r).iter_mut().zip(&merged.bias) {
                            *v = act.apply(*v + b);
                        }
                    }
                    Ok(z)
                })
                .collect::<Result<_>>()?;
        }
    }
    Ok(out)
}
