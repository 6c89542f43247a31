use std::path::Path;

use serde::Serialize;

use crate::backbone::{LoraAdapter, UpdateSet, Weights};
use crate::diagnostics::{
    check_cross_bound, check_downscale_bound, check_stationarity, interpolation_path, midpoint_correlation,
    BoundReport, CrossOptions, DownscaleOptions, PairDiagnostics, StationarityReport, StationarityToy, Update,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mergeops::{merge_com, merge_models_regmean, MergeSpec, Operator};
use crate::spaces::{merge_in_space, Space, SpaceConfig};
use crate::tasks::{Dataset, TaskData};

use super::config::{MergeProtocol, ProxyMode};
use super::grid::{grid_search_coefficient, GridResult};
use super::lab::Lab;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

fn split(t: &TaskData, s: Split) -> &Dataset {
    match s {
        Split::Val => &t.val,
        Split::Test => &t.test,
    }
}

/// Per-task accuracy of `w` and its mean.
pub fn task_accuracies(w: &Weights, tasks: &[TaskData], which: Split) -> Result<(Vec<f64>, f64)> {
    let accs: Vec<f64> = tasks.iter().map(|t| w.accuracy(split(t, which))).collect::<Result<_>>()?;
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    Ok((accs, mean))
}

/// Hyperparameter variants swept for `op`, each with a short label.
pub fn hyper_variants(op: Operator, proto: &MergeProtocol) -> Vec<(String, MergeSpec)> {
    let base = MergeSpec { seed: proto.seed, ..MergeSpec::new(op) };
    match op {
        Operator::Ties => proto
            .ties_keep
            .iter()
            .map(|&k| (format!("keep={k}"), MergeSpec { trim_keep: k, ..base.clone() }))
            .collect(),
        Operator::TiesDare => proto
            .dare_rates
            .iter()
            .map(|&r| {
                let spec = MergeSpec {
                    dare_keep: 1.0 - r,
                    dare_inner: proto.dare_inner,
                    trim_keep: proto.dare_trim_keep,
                    ..base.clone()
                };
                (format!("drop={r}"), spec)
            })
            .collect(),
        Operator::Cart => proto
            .cart_fractions
            .iter()
            .map(|&f| (format!("rank_frac={f}"), MergeSpec { cart_fraction: f, ..base.clone() }))
            .collect(),
        _ => vec![("-".into(), base)],
    }
}

fn proxies(tasks: &[TaskData], proto: &MergeProtocol, num_classes: usize) -> Vec<Matrix> {
    tasks
        .iter()
        .map(|t| {
            let name = format!("proxy-{}", t.spec.task_id);
            let d = match proto.proxy_mode {
                ProxyMode::Random => t.train.sample_random(proto.proxy_samples, proto.seed, &name),
                ProxyMode::Stratified => t.train.sample_stratified(proto.proxy_samples, num_classes, proto.seed, &name),
            };
            d.x
        })
        .collect()
}

/// Result of merging one adapter set with one operator in one space.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellResult {
    pub best_s: f64,
    pub hyper: String,
    pub val_metric: f64,
    pub per_task: Vec<f64>,
    pub average: f64,
    #[serde(skip)]
    pub trace: Option<GridResult>,
}

/// Merges `adapters` and evaluates on every task: grid search (and the
/// operator's hyperparameter sweep) on mean validation accuracy, then test
/// accuracy at the selected setting.
pub fn run_cell(lab: &Lab, adapters: &[&LoraAdapter], op: Operator, space: Space) -> Result<CellResult> {
    let proto = &lab.config.merge;
    let w0 = &lab.w0;
    if op.is_data_dependent() {
        if space != Space::Full {
            return Err(Error::config(format!("{} is only defined on full weights", op.name())));
        }
        let models: Vec<Weights> =
            adapters.iter().map(|a| w0.with_update(&a.materialize()?, 1.0)).collect::<Result<_>>()?;
        let refs: Vec<&Weights> = models.iter().collect();
        let px = proxies(&lab.tasks, proto, lab.config.backbone.num_classes);
        let prefs: Vec<&Matrix> = px.iter().collect();
        let merged = match op {
            Operator::Regmean => merge_models_regmean(&refs, &prefs, None)?,
            _ => merge_com(&refs, &prefs, None)?,
        };
        let (_, val_metric) = task_accuracies(&merged, &lab.tasks, Split::Val)?;
        let (per_task, average) = task_accuracies(&merged, &lab.tasks, Split::Test)?;
        return Ok(CellResult { best_s: 1.0, hyper: "-".into(), val_metric, per_task, average, trace: None });
    }
    let sc = SpaceConfig::new(space);
    let merged_at = |spec: &MergeSpec, s: f64| -> Result<Weights> {
        let u = merge_in_space(adapters, &spec.with_coefficient(s), &sc)?;
        w0.with_update(&u, 1.0)
    };
    let mut best: Option<(String, MergeSpec, GridResult)> = None;
    for (label, spec) in hyper_variants(op, proto) {
        let g = grid_search_coefficient(&proto.grid, |s| Ok(task_accuracies(&merged_at(&spec, s)?, &lab.tasks, Split::Val)?.1))?;
        if best.as_ref().is_none_or(|(_, _, b)| g.best_metric > b.best_metric) {
            best = Some((label, spec, g));
        }
    }
    let (hyper, spec, g) = best.ok_or_else(|| Error::Empty(format!("{} hyperparameter sweep", op.name())))?;
    let (per_task, average) = task_accuracies(&merged_at(&spec, g.best_s)?, &lab.tasks, Split::Test)?;
    Ok(CellResult { best_s: g.best_s, hyper, val_metric: g.best_metric, per_task, average, trace: Some(g) })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub protection: String,
    pub operator: Operator,
    pub space: Space,
    pub best_s: f64,
    pub hyper: String,
    pub per_task: Vec<f64>,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialRow {
    pub operator: Operator,
    pub space: Space,
    pub target: String,
    pub cell: CellResult,
    /// Accuracy on the protected task itself.
    pub target_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1 {
    pub task_ids: Vec<String>,
    pub rows: Vec<Table1Row>,
    pub trials: Vec<TrialRow>,
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

impl Table1 {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["protection", "operator", "space", "best_s", "hyper"].map(String::from).to_vec();
        h.extend(self.task_ids.iter().cloned());
        h.push("average".into());
        h
    }

    pub fn row(&self, protection: &str, op: Operator, space: Space) -> Option<&Table1Row> {
        self.rows.iter().find(|r| r.protection == protection && r.operator == op && r.space == space)
    }

    pub fn write_csv(&self, table: &Path, trials: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(table)?;
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.protection.clone(), r.operator.name().into(), r.space.name().into(), fmt(r.best_s), r.hyper.clone()];
            rec.extend(r.per_task.iter().map(|&v| fmt(v)));
            rec.push(fmt(r.average));
            w.write_record(rec)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(trials)?;
        let mut h: Vec<String> = ["operator", "space", "target", "best_s", "hyper", "val_metric"].map(String::from).to_vec();
        h.extend(self.task_ids.iter().cloned());
        h.extend(["average".into(), "target_accuracy".into()]);
        w.write_record(h)?;
        for t in &self.trials {
            let mut rec = vec![
                t.operator.name().into(),
                t.space.name().into(),
                t.target.clone(),
                fmt(t.cell.best_s),
                t.cell.hyper.clone(),
                fmt(t.cell.val_metric),
            ];
            rec.extend(t.cell.per_task.iter().map(|&v| fmt(v)));
            rec.push(fmt(t.cell.average));
            rec.push(fmt(t.target_accuracy));
            w.write_record(rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The 8-way protocol: for every operator and space, an all-unprotected
/// control merge and one trial per task with that task's adapter replaced
/// by its protected version.
pub fn table1(lab: &Lab) -> Result<Table1> {
    let proto = &lab.config.merge;
    let n = lab.tasks.len();
    if lab.vanilla.len() != n || lab.protected.len() != n {
        return Err(Error::Empty("adapters for every task".into()));
    }
    let vanilla: Vec<&LoraAdapter> = lab.vanilla.iter().collect();
    let mut rows = Vec::new();
    let mut trials = Vec::new();
    for &space in &proto.spaces {
        for &op in &proto.operators {
            if op.is_data_dependent() && space != Space::Full {
                continue;
            }
            let control = run_cell(lab, &vanilla, op, space)?;
            log::info!("{} / {}: unprotected {:.4}", op.name(), space.name(), control.average);
            rows.push(Table1Row {
                protection: "none".into(),
                operator: op,
                space,
                best_s: control.best_s,
                hyper: control.hyper,
                per_task: control.per_task,
                average: control.average,
            });
            let mut per_task = vec![0.0; n];
            let mut best_s = 0.0;
            for i in 0..n {
                let mut ads = vanilla.clone();
                ads[i] = &lab.protected[i];
                let cell = run_cell(lab, &ads, op, space)?;
                for (acc, v) in per_task.iter_mut().zip(&cell.per_task) {
                    *acc += v / n as f64;
                }
                best_s += cell.best_s / n as f64;
                trials.push(TrialRow {
                    operator: op,
                    space,
                    target: lab.tasks[i].spec.task_id.clone(),
                    target_accuracy: cell.per_task[i],
                    cell,
                });
            }
            let average = per_task.iter().sum::<f64>() / n as f64;
            log::info!("{} / {}: protected {:.4}", op.name(), space.name(), average);
            rows.push(Table1Row {
                protection: "trap2".into(),
                operator: op,
                space,
                best_s,
                hyper: "per-trial".into(),
                per_task,
                average,
            });
        }
    }
    Ok(Table1 { task_ids: lab.tasks.iter().map(|t| t.spec.task_id.clone()).collect(), rows, trials })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairRow {
    pub kappa: String,
    pub tau: String,
    /// Pairwise merge at the fixed coefficient with κ protected.
    pub acc_kappa: f64,
    pub acc_tau: f64,
    /// Same merge with κ's vanilla adapter.
    pub baseline_acc_kappa: f64,
    pub baseline_acc_tau: f64,
    pub v_norm: f64,
    pub dl_mid: f64,
    pub dl_mid_mean: f64,
    pub dl_mid_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseReport {
    pub rows: Vec<PairRow>,
    pub spearman: f64,
    pub pearson: f64,
}

impl PairwiseReport {
    pub const CSV_HEADER: [&'static str; 10] = [
        "kappa",
        "tau",
        "acc_kappa",
        "acc_tau",
        "baseline_acc_kappa",
        "baseline_acc_tau",
        "v_norm",
        "dl_mid",
        "dl_mid_mean",
        "dl_mid_max",
    ];

    pub fn write_csv(&self, pairs: &Path, correlation: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(pairs)?;
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.kappa.clone(),
                r.tau.clone(),
                fmt(r.acc_kappa),
                fmt(r.acc_tau),
                fmt(r.baseline_acc_kappa),
                fmt(r.baseline_acc_tau),
                fmt(r.v_norm),
                fmt(r.dl_mid),
                fmt(r.dl_mid_mean),
                fmt(r.dl_mid_max),
            ])?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_path(correlation)?;
        w.write_record(["pairs", "spearman", "pearson"])?;
        w.write_record([self.rows.len().to_string(), fmt(self.spearman), fmt(self.pearson)])?;
        w.flush()?;
        Ok(())
    }
}

/// All ordered (protected κ, vanilla τ) pairs: fixed-coefficient TA merge
/// plus the interpolation-path midpoint statistics on κ's test split.
pub fn pairwise_matrix(lab: &Lab) -> Result<PairwiseReport> {
    let c = lab.config.merge.pairwise_coefficient;
    let w0 = &lab.w0;
    let prot: Vec<UpdateSet> = lab.protected.iter().map(|a| a.materialize()).collect::<Result<_>>()?;
    let van: Vec<UpdateSet> = lab.vanilla.iter().map(|a| a.materialize()).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut diags: Vec<PairDiagnostics> = Vec::new();
    for (k, tk) in lab.tasks.iter().enumerate() {
        for (t, tt) in lab.tasks.iter().enumerate() {
            if k == t {
                continue;
            }
            let merged = w0.with_update(&prot[k].add(&van[t])?, c)?;
            let baseline = w0.with_update(&van[k].add(&van[t])?, c)?;
            let d = interpolation_path(
                w0,
                (&tk.spec.task_id, &prot[k], &tk.test),
                (&tt.spec.task_id, &van[t], &tt.test),
                &lab.config.diagnostics.beta_grid,
            )?;
            rows.push(PairRow {
                kappa: tk.spec.task_id.clone(),
                tau: tt.spec.task_id.clone(),
                acc_kappa: merged.accuracy(&tk.test)?,
                acc_tau: merged.accuracy(&tt.test)?,
                baseline_acc_kappa: baseline.accuracy(&tk.test)?,
                baseline_acc_tau: baseline.accuracy(&tt.test)?,
                v_norm: d.v_norm,
                dl_mid: d.dl_mid,
                dl_mid_mean: d.dl_mid_mean,
                dl_mid_max: d.dl_mid_max,
            });
            diags.push(d);
        }
    }
    let (spearman, pearson) = midpoint_correlation(&diags)?;
    Ok(PairwiseReport { rows, spearman, pearson })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremRow {
    pub check: String,
    pub subject: String,
    pub s: f64,
    pub report: BoundReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    pub stationarity: StationarityReport,
}

impl TheoremReport {
    pub const CSV_HEADER: [&'static str; 10] =
        ["check", "subject", "s", "mu_hat", "eps_hat", "lhs", "rhs", "margin", "tolerance", "satisfied"];

    pub fn write_csv(&self, bounds: &Path, stationarity: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(bounds)?;
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.rows {
            let b = &r.report;
            w.write_record([
                r.check.clone(),
                r.subject.clone(),
                fmt(r.s),
                fmt(b.mu_hat),
                fmt(b.eps_hat),
                fmt(b.lhs),
                fmt(b.rhs),
                fmt(b.margin),
                fmt(b.tolerance),
                b.satisfied.to_string(),
            ])?;
        }
        w.flush()?;
        let st = &self.stationarity;
        let mut w = csv::Writer::from_path(stationarity)?;
        w.write_record(["t", "min_grad_sq", "c", "grad_variance_estimate", "loglog_slope"])?;
        for (t, g) in st.t_list.iter().zip(&st.min_grad_sq) {
            w.write_record([
                t.to_string(),
                fmt(*g),
                fmt(st.c),
                fmt(st.grad_variance_estimate),
                fmt(st.loglog_slope),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn all_satisfied(&self) -> bool {
        self.rows.iter().all(|r| r.report.satisfied)
    }
}

/// Self-degradation bound for every adapter at the configured scales and
/// `s = 1/2`, the cross-task bound for every (protected, vanilla) pair and
/// the stationarity toy.
pub fn verify_theorems(lab: &Lab) -> Result<TheoremReport> {
    let diag = &lab.config.diagnostics;
    let mut scales = diag.bound_scales.clone();
    if !scales.contains(&0.5) {
        scales.push(0.5);
    }
    let w0 = &lab.w0;
    let mut rows = Vec::new();
    let prot: Vec<UpdateSet> = lab.protected.iter().map(|a| a.materialize()).collect::<Result<_>>()?;
    let van: Vec<UpdateSet> = lab.vanilla.iter().map(|a| a.materialize()).collect::<Result<_>>()?;
    for (i, task) in lab.tasks.iter().enumerate() {
        for (tag, u) in [("trap2", &prot[i]), ("none", &van[i])] {
            for &s in &scales {
                let report = check_downscale_bound(w0, Update::Lora(u), &task.test, s, DownscaleOptions::default())?;
                rows.push(TheoremRow { check: "downscale".into(), subject: format!("{}:{tag}", task.spec.task_id), s, report });
            }
        }
    }
    for (k, tk) in lab.tasks.iter().enumerate() {
        for (t, tt) in lab.tasks.iter().enumerate() {
            if k != t {
                let report = check_cross_bound(w0, &prot[k], &van[t], &tk.test, CrossOptions::default())?;
                let subject = format!("{}:trap2>{}:none", tk.spec.task_id, tt.spec.task_id);
                rows.push(TheoremRow { check: "cross".into(), subject, s: 0.5, report });
            }
        }
    }
    let toy = StationarityToy::seeded(200, 8, 0.1, lab.config.tasks.base_seed)?;
    let stationarity = check_stationarity(&toy, &diag.stationarity_horizons, diag.stationarity_c, lab.config.tasks.base_seed)?;
    Ok(TheoremReport { rows, stationarity })
}
