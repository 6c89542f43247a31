//! Synthetic multi-task benchmark.
//!
//! Every task is an `num_classes`-way Gaussian mixture in `input_dim`
//! dimensions, seen through a task-specific random rotation. Classes come in
//! adjacent pairs `(2j, 2j+1)` whose centres are close together, so the pair
//! is the hard distinction a task adapter has to learn. The frozen base model
//! is pre-trained on the pooled tasks under a coarse labelling that only
//! identifies the pair.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneSpec, Weights};
use crate::error::{Error, Result};
use crate::linalg::{orthonormalize, Matrix};
use crate::rng::{self, Purpose};
use crate::train::{AdamState, LrSchedule};

/// Distance scale of pair centres from the origin.
pub const CENTER_RADIUS: f64 = 3.0;
/// Distance between the two members of a class pair.
pub const PAIR_SEPARATION: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub seed: u64,
    pub num_classes: usize,
    /// `(train, val, test)` sample counts.
    pub samples_per_split: (usize, usize, usize),
    pub rotation_seed: u64,
    pub cluster_spread: f64,
}

impl TaskSpec {
    /// The `index`-th of the default tasks `t0…t7`.
    pub fn default_task(index: usize, base_seed: u64) -> Self {
        Self {
            task_id: format!("t{index}"),
            seed: base_seed.wrapping_add(1000 + index as u64),
            num_classes: 8,
            samples_per_split: (512, 128, 256),
            rotation_seed: base_seed.wrapping_add(2000 + index as u64),
            cluster_spread: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One sample per row.
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::shape(format!("{} samples but {} labels", x.rows(), y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { x: self.x.select_rows(idx), y: idx.iter().map(|&i| self.y[i]).collect() }
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let xs: Vec<&Matrix> = parts.iter().map(|d| &d.x).collect();
        let x = Matrix::vstack(&xs)?;
        let y = parts.iter().flat_map(|d| d.y.iter().copied()).collect();
        Dataset::new(x, y)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &c in &self.y {
            counts[c] += 1;
        }
        counts
    }

    /// CSV with header `x0,…,x{d-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (r, &label) in self.y.iter().enumerate() {
            let mut rec: Vec<String> = self.x.row(r).iter().map(|v| v.to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Uniform random subset of `n` samples (all of them if fewer).
    pub fn sample_random(&self, n: usize, seed: u64, name: &str) -> Dataset {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, name, Purpose::Proxy));
        idx.truncate(n.min(self.len()));
        idx.sort_unstable();
        self.subset(&idx)
    }

    /// Class-stratified subset of `n` samples. With at least `n` classes, `n`
    /// classes are chosen at random and one sample is drawn from each;
    /// otherwise samples are spread round-robin across classes.
    pub fn sample_stratified(&self, n: usize, num_classes: usize, seed: u64, name: &str) -> Dataset {
        let mut r = rng::stream(seed, name, Purpose::Proxy);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &c) in self.y.iter().enumerate() {
            by_class[c].push(i);
        }
        for bucket in &mut by_class {
            bucket.shuffle(&mut r);
        }
        let mut chosen = Vec::with_capacity(n);
        if num_classes >= n {
            let mut classes: Vec<usize> = (0..num_classes).filter(|&c| !by_class[c].is_empty()).collect();
            classes.shuffle(&mut r);
            for &c in classes.iter().take(n) {
                chosen.push(by_class[c][0]);
            }
        } else {
            let mut cursor = vec![0usize; num_classes];
            let mut c = 0;
            let mut stalled = 0;
            while chosen.len() < n.min(self.len()) && stalled < num_classes {
                if cursor[c] < by_class[c].len() {
                    chosen.push(by_class[c][cursor[c]]);
                    cursor[c] += 1;
                    stalled = 0;
                } else {
                    stalled += 1;
                }
                c = (c + 1) % num_classes;
            }
        }
        chosen.sort_unstable();
        self.subset(&chosen)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Class centres of a task before rotation: pairs share a random anchor and
/// differ by a random offset of length [`PAIR_SEPARATION`].
fn class_centers(spec: &TaskSpec, dim: usize) -> Vec<Vec<f64>> {
    let mut r = rng::stream(spec.seed, &spec.task_id, Purpose::Centers);
    let mut gaussian = |len: f64| -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
        let n = crate::linalg::norm(&v).max(f64::MIN_POSITIVE);
        v.into_iter().map(|x| x * len / n).collect()
    };
    let mut centers = Vec::with_capacity(spec.num_classes);
    let mut c = 0;
    while c < spec.num_classes {
        let anchor = gaussian(CENTER_RADIUS);
        if c + 1 < spec.num_classes {
            let offset = gaussian(PAIR_SEPARATION / 2.0);
            centers.push(anchor.iter().zip(&offset).map(|(a, o)| a - o).collect());
            centers.push(anchor.iter().zip(&offset).map(|(a, o)| a + o).collect());
            c += 2;
        } else {
            centers.push(anchor);
            c += 1;
        }
    }
    centers
}

/// Random orthogonal matrix from the Gram–Schmidt factor of a Gaussian matrix.
pub fn random_rotation(dim: usize, seed: u64, name: &str) -> Result<Matrix> {
    let mut r = rng::stream(seed, name, Purpose::Rotation);
    loop {
        let g = Matrix::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut r));
        let q = orthonormalize(&g)?;
        if q.cols() == dim {
            return Ok(q);
        }
    }
}

fn sample_split(
    spec: &TaskSpec,
    centers: &[Vec<f64>],
    rotation: &Matrix,
    n: usize,
    purpose: Purpose,
) -> Result<Dataset> {
    let dim = rotation.rows();
    let mut r = rng::stream(spec.seed, &spec.task_id, purpose);
    let mut raw = Matrix::zeros(n, dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % spec.num_classes;
        let row = raw.row_mut(i);
        for (x, &mu) in row.iter_mut().zip(&centers[c]) {
            let z: f64 = StandardNormal.sample(&mut r);
            *x = mu + spec.cluster_spread * z;
        }
        y.push(c);
    }
    // Rows are samples, so applying R to each is raw · Rᵀ.
    let x = raw.matmul_bt(rotation)?;
    Dataset::new(x, y)
}

/// Deterministic train/val/test splits for one task.
pub fn generate_task(spec: &TaskSpec, input_dim: usize) -> Result<TaskData> {
    let (n_train, n_val, n_test) = spec.samples_per_split;
    if spec.num_classes < 2 {
        return Err(Error::config("a task needs at least two classes"));
    }
    if n_train < spec.num_classes || n_val < spec.num_classes || n_test < spec.num_classes {
        return Err(Error::config(format!(
            "task {}: every split needs at least {} samples, got {:?}",
            spec.task_id, spec.num_classes, spec.samples_per_split
        )));
    }
    if !(spec.cluster_spread >= 0.0) || input_dim == 0 {
        return Err(Error::config("cluster_spread must be nonnegative and input_dim positive"));
    }
    let centers = class_centers(spec, input_dim);
    let rotation = random_rotation(input_dim, spec.rotation_seed, &spec.task_id)?;
    Ok(TaskData {
        spec: spec.clone(),
        train: sample_split(spec, &centers, &rotation, n_train, Purpose::Train)?,
        val: sample_split(spec, &centers, &rotation, n_val, Purpose::Val)?,
        test: sample_split(spec, &centers, &rotation, n_test, Purpose::Test)?,
    })
}

/// Class centres after rotation, one per row.
pub fn rotated_centers(spec: &TaskSpec, input_dim: usize) -> Result<Matrix> {
    let centers = class_centers(spec, input_dim);
    let rotation = random_rotation(input_dim, spec.rotation_seed, &spec.task_id)?;
    let raw = Matrix::from_cols(input_dim, &centers).transpose();
    raw.matmul_bt(&rotation)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 3000, batch_size: 128, learning_rate: 2e-3, seed: 17 }
    }
}

/// Coarse label used for pre-training: the pair `{2j, 2j+1}` is kept but the
/// member inside it is drawn at random, so the base model learns which pair a
/// sample belongs to while staying neutral inside the pair.
fn coarse_label(label: usize, num_classes: usize, r: &mut rng::Rng) -> usize {
    let base = label - label % 2;
    if base + 1 < num_classes && r.random_bool(0.5) {
        base + 1
    } else {
        base
    }
}

/// Pre-trains full base weights on the pooled training splits.
pub fn pretrain_base(tasks: &[TaskData], backbone: &BackboneSpec, cfg: &PretrainConfig) -> Result<Weights> {
    if tasks.len() < 2 {
        return Err(Error::config("pre-training needs at least two tasks"));
    }
    let mut weights = Weights::init(backbone, cfg.seed)?;
    if cfg.steps == 0 {
        return Ok(weights);
    }
    let parts: Vec<&Dataset> = tasks.iter().map(|t| &t.train).collect();
    let mut pooled = Dataset::concat(&parts)?;
    let mut relabel = rng::stream(cfg.seed, "pretrain", Purpose::Relabel);
    for y in pooled.y.iter_mut() {
        *y = coarse_label(*y, backbone.num_classes, &mut relabel);
    }

    let mut batches = rng::stream(cfg.seed, "pretrain", Purpose::Batches);
    let mut adam = AdamState::new(weights.param_len(), 0.0);
    let schedule = LrSchedule::CosineWithWarmup { warmup_steps: cfg.steps / 20 };
    let mut last = f64::NAN;
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| batches.random_range(0..pooled.len())).collect();
        let batch = pooled.subset(&idx);
        let (loss, grads) = match weights.loss_and_grad(&batch) {
            Ok(v) => v,
            Err(_) => return Err(Error::Divergence { step, last_finite_loss: last }),
        };
        if !loss.is_finite() {
            return Err(Error::Divergence { step, last_finite_loss: last });
        }
        last = loss;
        let lr = schedule.rate(cfg.learning_rate, step, cfg.steps);
        let mut flat = weights.flatten();
        adam.step(&mut flat, &grads.flatten(), lr);
        weights.unflatten(&flat);
    }
    Ok(weights)
}

/// Writes every split of every task as `<dir>/<task>_<split>.csv`.
pub fn export_csv(tasks: &[TaskData], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for t in tasks {
        t.train.write_csv(&dir.join(format!("{}_train.csv", t.spec.task_id)))?;
        t.val.write_csv(&dir.join(format!("{}_val.csv", t.spec.task_id)))?;
        t.test.write_csv(&dir.join(format!("{}_test.csv", t.spec.task_id)))?;
    }
    let mut readme = std::fs::File::create(dir.join("SCHEMA.txt"))?;
    writeln!(readme, "columns: x0..x{{d-1}} (features), label (class index)")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64) -> TaskSpec {
        TaskSpec { cluster_spread: spread, ..TaskSpec::default_task(0, 42) }
    }

    fn nearest_centroid_accuracy(data: &Dataset, centers: &Matrix) -> f64 {
        let mut correct = 0;
        for (i, &y) in data.y.iter().enumerate() {
            let row = data.x.row(i);
            let best = (0..centers.rows())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(centers.row(a)).map(|(x, c)| (x - c).powi(2)).sum();
                    let db: f64 = row.iter().zip(centers.row(b)).map(|(x, c)| (x - c).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += (best == y) as usize;
        }
        correct as f64 / data.len() as f64
    }

    /// Multinomial logistic regression by full-batch gradient descent.
    fn linear_probe_accuracy(train: &Dataset, test: &Dataset, classes: usize) -> f64 {
        let d = train.dim();
        let mut w = vec![vec![0.0; d + 1]; classes];
        for _ in 0..600 {
            let mut grad = vec![vec![0.0; d + 1]; classes];
            for (i, &y) in train.y.iter().enumerate() {
                let x = train.x.row(i);
                let logits: Vec<f64> =
                    w.iter().map(|wc| wc[d] + wc[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for c in 0..classes {
                    let p = (logits[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 };
                    for k in 0..d {
                        grad[c][k] += p * x[k];
                    }
                    grad[c][d] += p;
                }
            }
            for c in 0..classes {
                for k in 0..=d {
                    w[c][k] -= 0.5 * grad[c][k] / train.len() as f64;
                }
            }
        }
        let mut correct = 0;
        for (i, &y) in test.y.iter().enumerate() {
            let x = test.x.row(i);
            let pred = (0..classes)
                .max_by(|&a, &b| {
                    let la = w[a][d] + w[a][..d].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                    let lb = w[b][d] + w[b][..d].iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
                    la.total_cmp(&lb)
                })
                .unwrap();
            correct += (pred == y) as usize;
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(&spec(0.5), 32).unwrap();
        let b = generate_task(&spec(0.5), 32).unwrap();
        assert_eq!(a, b);
        let other = generate_task(&TaskSpec::default_task(1, 42), 32).unwrap();
        assert_ne!(a.train.x, other.train.x);
    }

    #[test]
    fn splits_are_disjoint_and_balanced() {
        let t = generate_task(&spec(0.5), 32).unwrap();
        let mut rows: Vec<Vec<u64>> = Vec::new();
        for d in [&t.train, &t.val, &t.test] {
            for r in 0..d.len() {
                rows.push(d.x.row(r).iter().map(|v| v.to_bits()).collect());
            }
            let counts = d.class_counts(8);
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(*lo >= 1 && hi - lo <= 1, "{counts:?}");
        }
        let total = rows.len();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), total);
    }

    #[test]
    fn zero_spread_is_separable() {
        let s = spec(0.0);
        let t = generate_task(&s, 32).unwrap();
        let centers = rotated_centers(&s, 32).unwrap();
        assert_eq!(nearest_centroid_accuracy(&t.train, &centers), 1.0);
    }

    #[test]
    fn default_spread_linear_probe_in_band() {
        let t = generate_task(&spec(0.5), 32).unwrap();
        let acc = linear_probe_accuracy(&t.train, &t.test, 8);
        assert!((0.6..=1.0).contains(&acc), "linear probe accuracy {acc}");
    }

    #[test]
    fn too_few_samples_rejected() {
        let mut s = spec(0.5);
        s.samples_per_split = (4, 16, 16);
        assert!(generate_task(&s, 32).is_err());
    }

    #[test]
    fn proxy_sampling() {
        let t = generate_task(&spec(0.5), 32).unwrap();
        let r = t.train.sample_random(100, 1, "t0");
        assert_eq!(r.len(), 100);
        let c = t.train.sample_stratified(100, 8, 1, "t0");
        let counts = c.class_counts(8);
        assert!(counts.iter().all(|&n| n == 12 || n == 13), "{counts:?}");
        let few = t.train.sample_stratified(4, 8, 1, "t0");
        let counts = few.class_counts(8);
        assert_eq!(counts.iter().filter(|&&n| n == 1).count(), 4);
    }
}
