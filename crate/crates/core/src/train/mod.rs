//! Vanilla LoRA fine-tuning, the TRAP² scale-penalised objective and the
//! full fine-tuning variant that penalises `W₀ + s·(W − W₀)`.

mod optim;

pub use optim::{AdamState, LrSchedule, Optimizer, OptimizerKind};

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, flatten_factor_grads, AdapterMeta, FactorGrad, LoraAdapter, WeightGrads, Weights,
};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, Rng};
use crate::tasks::{Dataset, TaskData};

/// Uniform density over `[s_min, 1 − δ] ∪ [1 + δ, s_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleDistribution {
    pub s_min: f64,
    pub s_max: f64,
    pub delta: f64,
}

impl Default for ScaleDistribution {
    fn default() -> Self {
        Self { s_min: 0.05, s_max: 2.0, delta: 0.05 }
    }
}

impl ScaleDistribution {
    pub fn validate(&self) -> Result<()> {
        let ok = self.s_min > 0.0
            && self.delta > 0.0
            && self.s_min <= 1.0 - self.delta
            && 1.0 + self.delta <= self.s_max
            && self.s_max.is_finite();
        if !ok {
            return Err(Error::config(format!(
                "scale distribution needs 0 < s_min <= 1-delta < 1+delta <= s_max, got {self:?}"
            )));
        }
        if self.total_length() <= 0.0 {
            return Err(Error::config("scale distribution has empty support"));
        }
        Ok(())
    }

    pub fn intervals(&self) -> [(f64, f64); 2] {
        [(self.s_min, 1.0 - self.delta), (1.0 + self.delta, self.s_max)]
    }

    fn total_length(&self) -> f64 {
        self.intervals().iter().map(|(a, b)| b - a).sum()
    }

    pub fn contains(&self, s: f64) -> bool {
        self.intervals().iter().any(|&(a, b)| s >= a && s <= b)
    }

    /// Analytic mean: length-weighted interval midpoints.
    pub fn mean(&self) -> f64 {
        let iv = self.intervals();
        iv.iter().map(|(a, b)| (b - a) * 0.5 * (a + b)).sum::<f64>() / self.total_length()
    }

    pub fn sample(&self, r: &mut Rng) -> f64 {
        let [(a1, b1), (a2, b2)] = self.intervals();
        let l1 = b1 - a1;
        let u = r.random::<f64>() * (l1 + b2 - a2);
        if u < l1 {
            a1 + u
        } else {
            (a2 + (u - l1)).min(b2)
        }
    }
}

/// Draws one scale from `dist` after validating it.
pub fn sample_scale(dist: &ScaleDistribution, r: &mut Rng) -> Result<f64> {
    dist.validate()?;
    Ok(dist.sample(r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    InverseScale,
    Constant,
}

impl Weighting {
    pub fn weight(self, s: f64) -> f64 {
        match self {
            Weighting::InverseScale => 1.0 / s,
            Weighting::Constant => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Trap2Config {
    pub lambda: f64,
    pub scale_dist: ScaleDistribution,
    pub weighting: Weighting,
    /// Draw a second, independent mini-batch for the off-nominal term.
    /// Off by default: the canonical update reuses the nominal batch.
    #[serde(default)]
    pub independent_off_batch: bool,
}

impl Default for Trap2Config {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            scale_dist: ScaleDistribution::default(),
            weighting: Weighting::InverseScale,
            independent_off_batch: false,
        }
    }
}

impl Trap2Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config(format!("lambda must be a nonnegative finite value, got {}", self.lambda)));
        }
        self.scale_dist.validate()
    }
}

/// LoRA shape: rank, α and target layers (`None` means every hidden layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub targets: Option<Vec<usize>>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self { rank: 4, alpha: 4.0, targets: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub weight_decay: f64,
    /// Probability of dropping a LoRA branch input (adapter training only).
    #[serde(default)]
    pub lora_dropout: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            schedule: LrSchedule::CosineWithWarmup { warmup_steps: 100 },
            steps: 2000,
            batch_size: 64,
            seed: 0,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            lora_dropout: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.lora_dropout) {
            return Err(Error::config("lora_dropout must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub nominal_loss: f64,
    pub off_loss: Option<f64>,
    pub s: Option<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "step,nominal_loss,off_loss,s,grad_norm";

    /// One row per step; `off_loss` and `s` are empty for vanilla runs.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "{}", Self::CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.steps {
            writeln!(f, "{},{},{},{},{}", r.step, r.nominal_loss, opt(r.off_loss), opt(r.s), r.grad_norm)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn final_nominal_loss(&self) -> Option<f64> {
        self.steps.last().map(|r| r.nominal_loss)
    }
}

/// Value and factor gradient of the TRAP² objective on one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Trap2Terms {
    pub objective: f64,
    pub nominal_loss: f64,
    pub off_loss: f64,
    pub grad: Vec<FactorGrad>,
}

/// `J = L(batch; s=1) − λ·w(s)·L(batch; s)` and its exact factor gradient.
pub fn trap2_objective(
    w0: &Weights,
    adapter: &LoraAdapter,
    batch: &Dataset,
    s: f64,
    cfg: &Trap2Config,
) -> Result<Trap2Terms> {
    trap2_objective_split(w0, adapter, batch, batch, s, cfg, None)
}

/// As [`trap2_objective`] with separate batches for the two terms and
/// optional LoRA dropout `(probability, rng)`.
pub fn trap2_objective_split(
    w0: &Weights,
    adapter: &LoraAdapter,
    nominal_batch: &Dataset,
    off_batch: &Dataset,
    s: f64,
    cfg: &Trap2Config,
    mut dropout: Option<(f64, &mut Rng)>,
) -> Result<Trap2Terms> {
    cfg.validate()?;
    if !cfg.scale_dist.contains(s) {
        return Err(Error::config(format!("scale {s} is outside the off-nominal support")));
    }
    let (nominal_loss, mut grad) = factor_loss_grad(w0, adapter, 1.0, nominal_batch, dropout.as_mut().map(|(p, r)| (*p, &mut **r)))?;
    let coef = cfg.lambda * cfg.weighting.weight(s);
    if coef == 0.0 {
        let (off_loss, _) = factor_loss_grad(w0, adapter, s, off_batch, None)?;
        return Ok(Trap2Terms { objective: nominal_loss, nominal_loss, off_loss, grad });
    }
    let (off_loss, off_grad) = factor_loss_grad(w0, adapter, s, off_batch, dropout.as_mut().map(|(p, r)| (*p, &mut **r)))?;
    for (g, o) in grad.iter_mut().zip(&off_grad) {
        g.b.axpy(-coef, &o.b)?;
        g.a.axpy(-coef, &o.a)?;
    }
    let objective = nominal_loss - coef * off_loss;
    if !objective.is_finite() {
        return Err(Error::NonFinite("trap2 objective".into()));
    }
    Ok(Trap2Terms { objective, nominal_loss, off_loss, grad })
}

fn factor_loss_grad(
    w0: &Weights,
    adapter: &LoraAdapter,
    s: f64,
    batch: &Dataset,
    dropout: Option<(f64, &mut Rng)>,
) -> Result<(f64, Vec<FactorGrad>)> {
    match dropout {
        Some((p, r)) if p > 0.0 => backbone::loss_and_factor_grad_dropout(w0, adapter, s, batch, 1.0 - p, r),
        _ => {
            let (loss, g) = backbone::loss_and_grad(w0, adapter, s, batch, backbone::Wrt::LoraFactors)?;
            match g {
                backbone::Grads::Lora(g) => Ok((loss, g)),
                backbone::Grads::Full(_) => unreachable!("factor gradient requested"),
            }
        }
    }
}

/// Value and full-weight gradient of the TRAP² objective where the
/// off-nominal term is evaluated at `W₀ + s·(W − W₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trap2FullTerms {
    pub objective: f64,
    pub nominal_loss: f64,
    pub off_loss: f64,
    pub grad: WeightGrads,
}

pub fn trap2_objective_full(
    w0: &Weights,
    w: &Weights,
    batch: &Dataset,
    s: f64,
    cfg: &Trap2Config,
) -> Result<Trap2FullTerms> {
    trap2_objective_full_split(w0, w, batch, batch, s, cfg)
}

pub fn trap2_objective_full_split(
    w0: &Weights,
    w: &Weights,
    nominal_batch: &Dataset,
    off_batch: &Dataset,
    s: f64,
    cfg: &Trap2Config,
) -> Result<Trap2FullTerms> {
    cfg.validate()?;
    if !cfg.scale_dist.contains(s) {
        return Err(Error::config(format!("scale {s} is outside the off-nominal support")));
    }
    let (nominal_loss, mut grad) = w.loss_and_grad(nominal_batch)?;
    let scaled = w.scaled_from(w0, s)?;
    let (off_loss, off_grad) = scaled.loss_and_grad(off_batch)?;
    // d/dW L(W₀ + s(W − W₀)) = s·∇L at the scaled point.
    let coef = cfg.lambda * cfg.weighting.weight(s) * s;
    for (g, o) in grad.layers.iter_mut().zip(&off_grad.layers) {
        g.weight.axpy(-coef, &o.weight)?;
        for (gb, ob) in g.bias.iter_mut().zip(&o.bias) {
            *gb -= coef * ob;
        }
    }
    let objective = nominal_loss - cfg.lambda * cfg.weighting.weight(s) * off_loss;
    if !objective.is_finite() {
        return Err(Error::NonFinite("trap2 objective".into()));
    }
    Ok(Trap2FullTerms { objective, nominal_loss, off_loss, grad })
}

fn sample_batch(data: &Dataset, n: usize, r: &mut Rng) -> Dataset {
    let idx: Vec<usize> = (0..n).map(|_| r.random_range(0..data.len())).collect();
    data.subset(&idx)
}

fn protection_tag(p: Option<&Trap2Config>) -> &'static str {
    if p.is_some() {
        "trap2"
    } else {
        "none"
    }
}

/// Trains a fresh LoRA adapter on `task.train` over the frozen `w0`.
///
/// With `protection = Some(cfg)` every step draws one scale `s` and descends
/// the TRAP² objective; otherwise it descends the nominal loss.
pub fn train_adapter(
    w0: &Weights,
    task: &TaskData,
    lora: &AdapterConfig,
    opt: &OptimizerConfig,
    protection: Option<&Trap2Config>,
) -> Result<(LoraAdapter, TrainReport)> {
    opt.validate()?;
    if let Some(cfg) = protection {
        cfg.validate()?;
    }
    let start = Instant::now();
    let name = &task.spec.task_id;
    let targets = lora.targets.clone().unwrap_or_else(|| w0.spec.hidden_layer_indices());
    let meta = AdapterMeta { task_id: name.clone(), seed: opt.seed, protection: protection_tag(protection).into() };
    let mut adapter = LoraAdapter::init(&w0.spec, &targets, lora.rank, lora.alpha, meta)?;

    let mut batches = rng::stream(opt.seed, name, Purpose::Batches);
    let mut scales = rng::stream(opt.seed, name, Purpose::Scales);
    let mut drop = rng::stream(opt.seed, name, Purpose::Dropout);
    let mut optimizer = Optimizer::new(opt.optimizer, adapter.param_len(), opt.weight_decay);
    let mut records = Vec::with_capacity(opt.steps);
    let mut last = f64::NAN;
    let dropout = opt.lora_dropout;

    for step in 0..opt.steps {
        let batch = sample_batch(&task.train, opt.batch_size, &mut batches);
        let outcome = match protection {
            None => factor_loss_grad(w0, &adapter, 1.0, &batch, Some((dropout, &mut drop)))
                .map(|(loss, g)| (loss, None, None, g)),
            Some(cfg) => {
                let s = cfg.scale_dist.sample(&mut scales);
                let off = if cfg.independent_off_batch {
                    Some(sample_batch(&task.train, opt.batch_size, &mut batches))
                } else {
                    None
                };
                let off_batch = off.as_ref().unwrap_or(&batch);
                trap2_objective_split(w0, &adapter, &batch, off_batch, s, cfg, Some((dropout, &mut drop)))
                    .map(|t| (t.nominal_loss, Some(t.off_loss), Some(s), t.grad))
            }
        };
        let (nominal, off, s, grad) = match outcome {
            Ok(v) if v.0.is_finite() => v,
            _ => return Err(Error::Divergence { step, last_finite_loss: last }),
        };
        last = nominal;
        let flat_grad = flatten_factor_grads(&grad);
        let grad_norm = flat_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, last_finite_loss: last });
        }
        let lr = opt.schedule.rate(opt.learning_rate, step, opt.steps);
        let mut params = adapter.flatten();
        optimizer.step(&mut params, &flat_grad, lr);
        adapter.unflatten(&params);
        records.push(StepRecord { step, nominal_loss: nominal, off_loss: off, s, grad_norm });
    }
    Ok((adapter, TrainReport { steps: records, wall_clock_secs: start.elapsed().as_secs_f64() }))
}

/// Full fine-tuning of every weight and bias starting from `w0`.
pub fn train_full(
    w0: &Weights,
    task: &TaskData,
    opt: &OptimizerConfig,
    protection: Option<&Trap2Config>,
) -> Result<(Weights, TrainReport)> {
    opt.validate()?;
    if let Some(cfg) = protection {
        cfg.validate()?;
    }
    let start = Instant::now();
    let name = &task.spec.task_id;
    let mut w = w0.clone();
    let mut batches = rng::stream(opt.seed, name, Purpose::Batches);
    let mut scales = rng::stream(opt.seed, name, Purpose::Scales);
    let mut optimizer = Optimizer::new(opt.optimizer, w.param_len(), opt.weight_decay);
    let mut records = Vec::with_capacity(opt.steps);
    let mut last = f64::NAN;

    for step in 0..opt.steps {
        let batch = sample_batch(&task.train, opt.batch_size, &mut batches);
        let outcome = match protection {
            None => w.loss_and_grad(&batch).map(|(l, g)| (l, None, None, g)),
            Some(cfg) => {
                let s = cfg.scale_dist.sample(&mut scales);
                let off = if cfg.independent_off_batch {
                    Some(sample_batch(&task.train, opt.batch_size, &mut batches))
                } else {
                    None
                };
                trap2_objective_full_split(w0, &w, &batch, off.as_ref().unwrap_or(&batch), s, cfg)
                    .map(|t| (t.nominal_loss, Some(t.off_loss), Some(s), t.grad))
            }
        };
        let (nominal, off, s, grad) = match outcome {
            Ok(v) if v.0.is_finite() => v,
            _ => return Err(Error::Divergence { step, last_finite_loss: last }),
        };
        last = nominal;
        let flat_grad = grad.flatten();
        let grad_norm = flat_grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step, last_finite_loss: last });
        }
        let lr = opt.schedule.rate(opt.learning_rate, step, opt.steps);
        let mut params = w.flatten();
        optimizer.step(&mut params, &flat_grad, lr);
        w.unflatten(&params);
        records.push(StepRecord { step, nominal_loss: nominal, off_loss: off, s, grad_norm });
    }
    Ok((w, TrainReport { steps: records, wall_clock_secs: start.elapsed().as_secs_f64() }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneSpec;
    use crate::tasks::{generate_task, TaskSpec};

    fn small_task() -> (Weights, TaskData) {
        let spec = BackboneSpec { input_dim: 6, hidden_dims: vec![8, 8], num_classes: 4, ..Default::default() };
        let w0 = Weights::init(&spec, 3).unwrap();
        let ts = TaskSpec {
            num_classes: 4,
            samples_per_split: (64, 16, 16),
            ..TaskSpec::default_task(0, 5)
        };
        (w0, generate_task(&ts, 6).unwrap())
    }

    #[test]
    fn sampling_respects_support() {
        let d = ScaleDistribution::default();
        let mut r = rng::stream(1, "scales", Purpose::Scales);
        for _ in 0..100_000 {
            let s = d.sample(&mut r);
            assert!(d.contains(s));
            assert!(!(s > 0.95 && s < 1.05));
            assert!((0.05..=2.0).contains(&s));
        }
    }

    #[test]
    fn degenerate_lower_interval() {
        let d = ScaleDistribution { s_min: 0.9, s_max: 2.0, delta: 0.1 };
        d.validate().unwrap();
        let mut r = rng::stream(2, "scales", Purpose::Scales);
        for _ in 0..10_000 {
            assert!(d.sample(&mut r) >= 1.1);
        }
    }

    #[test]
    fn invalid_distributions() {
        for d in [
            ScaleDistribution { s_min: 0.0, s_max: 2.0, delta: 0.05 },
            ScaleDistribution { s_min: 0.5, s_max: 2.0, delta: 0.6 },
            ScaleDistribution { s_min: 0.05, s_max: 1.01, delta: 0.05 },
            ScaleDistribution { s_min: 0.05, s_max: 2.0, delta: 0.0 },
        ] {
            let mut r = rng::stream(0, "x", Purpose::Scales);
            assert!(sample_scale(&d, &mut r).is_err(), "{d:?}");
        }
    }

    #[test]
    fn empirical_mean_matches_analytic() {
        let d = ScaleDistribution::default();
        let mut r = rng::stream(3, "scales", Purpose::Scales);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| d.sample(&mut r)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        // Analytic law: 0.9 of mass on [0.05, 0.95], 0.95 on [1.05, 2.0].
        let (l1, l2) = (0.9, 0.95);
        let m_analytic = (l1 * 0.5 + l2 * 1.525) / (l1 + l2);
        let second = (l1 * (0.95f64.powi(3) - 0.05f64.powi(3)) / (3.0 * l1)
            + l2 * (2.0f64.powi(3) - 1.05f64.powi(3)) / (3.0 * l2))
            / (l1 + l2);
        let sd = (second - m_analytic * m_analytic).sqrt() / (n as f64).sqrt();
        assert!((mean - m_analytic).abs() < 3.0 * sd, "mean {mean} analytic {m_analytic}");
        assert!((d.mean() - m_analytic).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_and_inverse_weighting() {
        let (w0, task) = small_task();
        let lora = AdapterConfig { rank: 2, alpha: 2.0, targets: None };
        let mut a =
            LoraAdapter::init(&w0.spec, &[0, 1], lora.rank, lora.alpha, AdapterMeta::default()).unwrap();
        for l in &mut a.layers {
            l.b = crate::linalg::Matrix::from_fn(l.b.rows(), l.b.cols(), |i, j| 0.1 * (i as f64 - j as f64));
        }
        let batch = &task.train;
        let zero = Trap2Config { lambda: 0.0, ..Default::default() };
        let t = trap2_objective(&w0, &a, batch, 0.5, &zero).unwrap();
        let nominal = backbone::evaluate(&w0, Some(&a.materialize().unwrap()), 1.0, batch).unwrap().loss;
        assert_eq!(t.objective, t.nominal_loss);
        assert!((t.nominal_loss - nominal).abs() < 1e-12);

        let cfg = Trap2Config { lambda: 1.0, ..Default::default() };
        let t = trap2_objective(&w0, &a, batch, 0.5, &cfg).unwrap();
        assert!((t.objective - (t.nominal_loss - 2.0 * t.off_loss)).abs() < 1e-12);
        let c = Trap2Config { weighting: Weighting::Constant, ..cfg };
        let t = trap2_objective(&w0, &a, batch, 0.5, &c).unwrap();
        assert!((t.objective - (t.nominal_loss - t.off_loss)).abs() < 1e-12);
        assert!(trap2_objective(&w0, &a, batch, 1.0, &cfg).is_err());
    }

    #[test]
    fn training_is_deterministic_and_audited() {
        let (w0, task) = small_task();
        let opt = OptimizerConfig { steps: 60, batch_size: 16, learning_rate: 1e-2, ..Default::default() };
        let cfg = Trap2Config::default();
        let lora = AdapterConfig { rank: 2, alpha: 2.0, targets: None };
        let (a1, r1) = train_adapter(&w0, &task, &lora, &opt, Some(&cfg)).unwrap();
        let (a2, r2) = train_adapter(&w0, &task, &lora, &opt, Some(&cfg)).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(r1.steps, r2.steps);
        assert_eq!(r1.steps.len(), 60);
        assert_eq!(a1.meta.protection, "trap2");
        assert!(r1.steps.iter().all(|r| cfg.scale_dist.contains(r.s.unwrap())));

        let (f1, fr) = train_full(&w0, &task, &opt, Some(&cfg)).unwrap();
        let (f2, _) = train_full(&w0, &task, &opt, Some(&cfg)).unwrap();
        assert_eq!(f1, f2);
        assert!(fr.steps.iter().all(|r| !(r.s.unwrap() > 0.95 && r.s.unwrap() < 1.05)));
    }

    #[test]
    fn lambda_zero_full_matches_vanilla() {
        let (w0, task) = small_task();
        let opt = OptimizerConfig { steps: 40, batch_size: 16, learning_rate: 1e-2, ..Default::default() };
        let zero = Trap2Config { lambda: 0.0, ..Default::default() };
        let (a, ra) = train_full(&w0, &task, &opt, None).unwrap();
        let (b, rb) = train_full(&w0, &task, &opt, Some(&zero)).unwrap();
        assert_eq!(a, b);
        for (x, y) in ra.steps.iter().zip(&rb.steps) {
            assert_eq!(x.nominal_loss, y.nominal_loss);
        }
    }

    #[test]
    fn vanilla_training_reduces_loss() {
        let (w0, task) = small_task();
        let opt = OptimizerConfig { steps: 300, batch_size: 32, learning_rate: 1e-2, ..Default::default() };
        let lora = AdapterConfig { rank: 2, alpha: 2.0, targets: None };
        let (a, report) = train_adapter(&w0, &task, &lora, &opt, None).unwrap();
        let before = w0.evaluate(&task.train).unwrap().loss;
        let after = backbone::evaluate(&w0, Some(&a.materialize().unwrap()), 1.0, &task.train).unwrap().loss;
        assert!(after < before, "{after} !< {before}");
        assert!(report.steps.iter().all(|r| r.s.is_none()));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), TrainReport::CSV_HEADER);
        assert_eq!(text.lines().count(), 301);
    }

    #[test]
    fn dropout_training_runs() {
        let (w0, task) = small_task();
        let opt = OptimizerConfig { steps: 20, batch_size: 16, lora_dropout: 0.1, ..Default::default() };
        let lora = AdapterConfig { rank: 2, alpha: 2.0, targets: None };
        let cfg = Trap2Config::default();
        let (a1, _) = train_adapter(&w0, &task, &lora, &opt, Some(&cfg)).unwrap();
        let (a2, _) = train_adapter(&w0, &task, &lora, &opt, Some(&cfg)).unwrap();
        assert_eq!(a1, a2);
    }
}
