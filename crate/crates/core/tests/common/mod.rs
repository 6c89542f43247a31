//! Reference implementations and fixtures shared by the integration tests.
//! Nothing here calls the library routine it is used to check.
#![allow(dead_code)]

use rand_distr::{Distribution, StandardNormal};
use unmerge_core::backbone::{Activation, AdapterMeta, BackboneSpec, LoraAdapter, Weights};
use unmerge_core::linalg::Matrix;
use unmerge_core::rng::{self, Purpose};
use unmerge_core::tasks::Dataset;

pub fn gaussian(rows: usize, cols: usize, seed: u64, name: &str) -> Matrix {
    let mut r = rng::stream(seed, name, Purpose::Test);
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut r))
}

pub fn tiny_spec(activation: Activation) -> BackboneSpec {
    BackboneSpec { input_dim: 5, hidden_dims: vec![6, 4], num_classes: 3, activation }
}

pub fn batch(spec: &BackboneSpec, n: usize, seed: u64) -> Dataset {
    let x = gaussian(n, spec.input_dim, seed, "batch");
    let y = (0..n).map(|i| (i * 7 + seed as usize) % spec.num_classes).collect();
    Dataset::new(x, y).unwrap()
}

/// Adapter on `targets` with Gaussian `B` so the gradient is non-trivial.
pub fn random_adapter(spec: &BackboneSpec, targets: &[usize], rank: usize, seed: u64) -> LoraAdapter {
    let meta = AdapterMeta { task_id: format!("a{seed}"), seed, protection: "none".into() };
    let mut a = LoraAdapter::init(spec, targets, rank, rank as f64, meta).unwrap();
    for (i, l) in a.layers.iter_mut().enumerate() {
        l.b = gaussian(l.b.rows(), l.b.cols(), seed, &format!("b{i}")).scale(0.5);
    }
    a
}

/// Initialised weights with Gaussian biases, so no pre-activation sits
/// exactly on a ReLU kink.
pub fn random_weights(spec: &BackboneSpec, seed: u64) -> Weights {
    let mut w = Weights::init(spec, seed).unwrap();
    for (i, l) in w.layers.iter_mut().enumerate() {
        let b = gaussian(1, l.bias.len(), seed, &format!("bias{i}"));
        l.bias.iter_mut().zip(b.as_slice()).for_each(|(x, z)| *x = 0.1 * z);
    }
    w
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let up = f(&p);
            p[i] = x[i] - h;
            let down = f(&p);
            p[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest entrywise `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// TIES written directly from its definition, one coordinate at a time.
pub fn ties_reference(deltas: &[&Matrix], keep: f64, s: f64) -> Matrix {
    let (rows, cols) = deltas[0].shape();
    let n = rows * cols;
    let k = ((keep * n as f64).ceil() as usize).clamp(1, n);
    let trimmed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let v = d.as_slice();
            (0..n)
                .map(|i| {
                    let bigger = (0..n)
                        .filter(|&j| v[j].abs() > v[i].abs() || (v[j].abs() == v[i].abs() && j < i))
                        .count();
                    if bigger < k {
                        v[i]
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..n {
        let total: f64 = trimmed.iter().map(|t| t[i]).sum();
        let sign = if total >= 0.0 { 1.0 } else { -1.0 };
        let mut sum = 0.0;
        let mut count = 0;
        for t in &trimmed {
            if t[i] != 0.0 && t[i].signum() == sign {
                sum += t[i];
                count += 1;
            }
        }
        out.as_mut_slice()[i] = if count > 0 { s * sum / count as f64 } else { 0.0 };
    }
    out
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(m: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut a: Vec<Vec<f64>> = m.iter().zip(b).map(|(row, &r)| row.iter().copied().chain([r]).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..n {
            if r != c {
                let f = a[r][c] / a[c][c];
                for j in c..=n {
                    a[r][j] -= f * a[c][j];
                }
            }
        }
    }
    (0..n).map(|i| a[i][n] / a[i][i]).collect()
}

/// `argmin_W Σ_i ‖X_i Wᵀ − X_i W_iᵀ‖²` row by row from the normal
/// equations `(Σ X_iᵀX_i) w = Σ X_iᵀX_i w_i`.
pub fn least_squares_merge(weights: &[&Matrix], inputs: &[&Matrix]) -> Matrix {
    let (rows, d) = weights[0].shape();
    let mut normal = vec![vec![0.0; d]; d];
    for x in inputs {
        for s in 0..x.rows() {
            let xs = x.row(s);
            for i in 0..d {
                for j in 0..d {
                    normal[i][j] += xs[i] * xs[j];
                }
            }
        }
    }
    let mut out = Matrix::zeros(rows, d);
    for r in 0..rows {
        let mut rhs = vec![0.0; d];
        for (w, x) in weights.iter().zip(inputs) {
            for s in 0..x.rows() {
                let xs = x.row(s);
                let target: f64 = (0..d).map(|j| w[(r, j)] * xs[j]).sum();
                for i in 0..d {
                    rhs[i] += xs[i] * target;
                }
            }
        }
        out.row_mut(r).copy_from_slice(&gauss_solve(&normal, &rhs));
    }
    out
}

/// `act(X Wᵀ + b)` with explicit loops.
pub fn dense_layer(x: &Matrix, w: &Matrix, bias: &[f64], act: Activation) -> Matrix {
    Matrix::from_fn(x.rows(), w.rows(), |s, o| {
        let z: f64 = (0..w.cols()).map(|j| x[(s, j)] * w[(o, j)]).sum::<f64>() + bias[o];
        match act {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    })
}

/// Two-layer chain-of-merges reference: layer 0 from the raw proxies,
/// layer 1 from the proxies pushed through the merged layer 0.
pub fn com_two_layer_reference(models: &[&Weights], proxies: &[&Matrix]) -> (Matrix, Matrix) {
    let w0s: Vec<&Matrix> = models.iter().map(|m| &m.layers[0].weight).collect();
    let first = least_squares_merge(&w0s, proxies);
    let n = models.len() as f64;
    let bias0: Vec<f64> =
        (0..first.rows()).map(|o| models.iter().map(|m| m.layers[0].bias[o]).sum::<f64>() / n).collect();
    let hidden: Vec<Matrix> =
        proxies.iter().map(|x| dense_layer(x, &first, &bias0, models[0].spec.activation)).collect();
    let hrefs: Vec<&Matrix> = hidden.iter().collect();
    let w1s: Vec<&Matrix> = models.iter().map(|m| &m.layers[1].weight).collect();
    (first, least_squares_merge(&w1s, &hrefs))
}

pub fn max_abs_diff(a: &Matrix, b: &Matrix) -> f64 {
    a.sub(b).unwrap().max_abs()
}

/// Worst entrywise relative error of each analytic gradient against central
/// differences on one seeded network.
#[derive(Debug, Clone, Copy, Default)]
pub struct GradErrors {
    pub lora: f64,
    pub full: f64,
    pub trap2_lora: f64,
    pub trap2_full: f64,
}

impl GradErrors {
    pub fn max(&self) -> f64 {
        self.lora.max(self.full).max(self.trap2_lora).max(self.trap2_full)
    }
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_FLOOR: f64 = 1e-6;

pub fn gradient_errors(seed: u64, activation: Activation) -> GradErrors {
    use unmerge_core::backbone::{flatten_factor_grads, loss_and_grad, Grads, Wrt};
    use unmerge_core::train::{trap2_objective, trap2_objective_full, Trap2Config};

    let spec = tiny_spec(activation);
    let w0 = random_weights(&spec, seed);
    let adapter = random_adapter(&spec, &[0, 1, 2], 2, seed);
    let data = batch(&spec, 8, seed);
    let s = 0.7;
    let trap = Trap2Config { lambda: 0.3, ..Trap2Config::default() };
    let s_off = 0.4;

    let Grads::Lora(g) = loss_and_grad(&w0, &adapter, s, &data, Wrt::LoraFactors).unwrap().1 else { unreachable!() };
    let with = |p: &[f64]| {
        let mut a = adapter.clone();
        a.unflatten(p);
        a
    };
    let fd = central_diff(|p| loss_and_grad(&w0, &with(p), s, &data, Wrt::LoraFactors).unwrap().0, &adapter.flatten(), FD_STEP);
    let lora = max_rel_err(&flatten_factor_grads(&g), &fd, FD_FLOOR);

    let Grads::Full(g) = loss_and_grad(&w0, &adapter, s, &data, Wrt::FullWeights).unwrap().1 else { unreachable!() };
    let eff = w0.with_update(&adapter.materialize().unwrap(), s).unwrap();
    let at = |p: &[f64]| {
        let mut w = eff.clone();
        w.unflatten(p);
        w
    };
    let fd = central_diff(|p| at(p).evaluate(&data).unwrap().loss, &eff.flatten(), FD_STEP);
    let full = max_rel_err(&g.flatten(), &fd, FD_FLOOR);

    let t = trap2_objective(&w0, &adapter, &data, s_off, &trap).unwrap();
    let fd = central_diff(|p| trap2_objective(&w0, &with(p), &data, s_off, &trap).unwrap().objective, &adapter.flatten(), FD_STEP);
    let trap2_lora = max_rel_err(&flatten_factor_grads(&t.grad), &fd, FD_FLOOR);

    let t = trap2_objective_full(&w0, &eff, &data, s_off, &trap).unwrap();
    let fd = central_diff(|p| trap2_objective_full(&w0, &at(p), &data, s_off, &trap).unwrap().objective, &eff.flatten(), FD_STEP);
    let trap2_full = max_rel_err(&t.grad.flatten(), &fd, FD_FLOOR);

    GradErrors { lora, full, trap2_lora, trap2_full }
}
