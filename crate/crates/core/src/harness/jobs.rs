use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{LoraAdapter, Weights};
use crate::diagnostics::{interpolation_path, scale_sweep, uniform_avg_proxy, Update};
use crate::error::{Error, Result};
use crate::mergeops::{MergeSpec, Operator};
use crate::protect::{protect_refit, protect_star, ProtectKind, ProtectTransform};
use crate::spaces::{merge_in_space, Space, SpaceConfig};
use crate::tasks::{export_csv, TaskData};
use crate::train::{train_adapter, Trap2Config};

use super::config::ExperimentConfig;
use super::lab::{build_base, build_tasks, Lab, LambdaChoice};
use super::persist::{load_adapter, load_weights, save_adapter, save_weights, sha256_hex, FORMAT_VERSION};
use super::protocol::{pairwise_matrix, run_cell, table1, task_accuracies, verify_theorems, Split};

pub const MANIFEST: &str = "manifest.toml";

/// One CLI command with its command-specific arguments; together with an
/// [`ExperimentConfig`] it fully determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    Pretrain,
    Train {
        task: usize,
        protected: bool,
        /// Fixed λ; `None` runs the validation search over the λ grid.
        lambda: Option<f64>,
        base: Option<PathBuf>,
    },
    Protect {
        adapter: PathBuf,
        base: Option<PathBuf>,
        kind: ProtectKind,
        seed: u64,
    },
    Merge {
        adapters: Vec<PathBuf>,
        base: Option<PathBuf>,
        operator: Operator,
        space: Space,
        coefficient: f64,
        trim_keep: f64,
        dare_rate: f64,
        cart_fraction: f64,
    },
    SweepScale {
        adapter: PathBuf,
        base: Option<PathBuf>,
    },
    Interpolate {
        kappa: PathBuf,
        tau: PathBuf,
        base: Option<PathBuf>,
    },
    UniformAvg {
        adapter: PathBuf,
        base: Option<PathBuf>,
    },
    Gridsearch {
        adapters: Vec<PathBuf>,
        base: Option<PathBuf>,
        operator: Operator,
        space: Space,
    },
    VerifyTheorems,
    Table1,
    PairwiseMatrix,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::Pretrain => "pretrain",
            Job::Train { .. } => "train",
            Job::Protect { .. } => "protect",
            Job::Merge { .. } => "merge",
            Job::SweepScale { .. } => "sweep-scale",
            Job::Interpolate { .. } => "interpolate",
            Job::UniformAvg { .. } => "uniform-avg",
            Job::Gridsearch { .. } => "gridsearch",
            Job::VerifyTheorems => "verify-theorems",
            Job::Table1 => "table1",
            Job::PairwiseMatrix => "pairwise-matrix",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub job: Job,
    pub config: ExperimentConfig,
    /// Output file (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let m: Manifest = toml::from_str(&text)
            .map_err(|e| Error::Malformed { path: path.display().to_string(), reason: e.to_string() })?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: m.format_version, expected: FORMAT_VERSION });
        }
        m.config.validate()?;
        Ok(m)
    }
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    outputs: Vec<String>,
}

impl Ctx<'_> {
    fn path(&mut self, name: &str) -> Result<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.outputs.push(name.to_string());
        Ok(p)
    }

    fn tasks(&self) -> Result<Vec<TaskData>> {
        build_tasks(self.cfg)
    }

    fn base(&self, path: &Option<PathBuf>, tasks: &[TaskData]) -> Result<Weights> {
        match path {
            Some(p) => load_weights(p),
            None => build_base(self.cfg, tasks),
        }
    }

    fn adapter(&self, path: &Path, w0: &Weights) -> Result<LoraAdapter> {
        let a = load_adapter(path, Some(w0))?;
        a.validate(&w0.spec)?;
        Ok(a)
    }
}

fn task_of<'t>(tasks: &'t [TaskData], a: &LoraAdapter) -> Result<&'t TaskData> {
    tasks
        .iter()
        .find(|t| t.spec.task_id == a.meta.task_id)
        .ok_or_else(|| Error::config(format!("adapter task {:?} is not among the configured tasks", a.meta.task_id)))
}

fn write_selection(choices: &[LambdaChoice], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LambdaChoice::CSV_HEADER.split(','))?;
    for c in choices {
        w.write_record([
            c.task_id.clone(),
            c.lambda.to_string(),
            c.vanilla_val_acc.to_string(),
            c.val_acc.to_string(),
            c.val_acc_probe.to_string(),
            c.eligible.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn save_lab(lab: &Lab, ctx: &mut Ctx<'_>) -> Result<()> {
    save_weights(&lab.w0, &ctx.path("base.json")?)?;
    for (v, p) in lab.vanilla.iter().zip(&lab.protected) {
        save_adapter(v, &lab.w0, &ctx.path(&format!("adapters/{}-none.json", v.meta.task_id))?)?;
        save_adapter(p, &lab.w0, &ctx.path(&format!("adapters/{}-trap2.json", p.meta.task_id))?)?;
    }
    write_selection(&lab.selection, &ctx.path("lambda_selection.csv")?)
}

fn write_accuracy_rows(path: &Path, header: [&str; 2], rows: &[(String, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for (k, v) in rows {
        w.write_record([k.clone(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn run_job(job: &Job, ctx: &mut Ctx<'_>) -> Result<()> {
    let cfg = ctx.cfg;
    match job {
        Job::Pretrain => {
            let tasks = ctx.tasks()?;
            let w0 = build_base(cfg, &tasks)?;
            save_weights(&w0, &ctx.path("base.json")?)?;
            let (per_task, _) = task_accuracies(&w0, &tasks, Split::Test)?;
            let rows: Vec<(String, f64)> = tasks.iter().map(|t| t.spec.task_id.clone()).zip(per_task).collect();
            write_accuracy_rows(&ctx.path("base_accuracy.csv")?, ["task", "accuracy"], &rows)?;
            let data_dir = ctx.dir.join("data");
            std::fs::create_dir_all(&data_dir)?;
            export_csv(&tasks, &data_dir)?;
            for t in &tasks {
                for s in ["train", "val", "test"] {
                    ctx.outputs.push(format!("data/{}_{s}.csv", t.spec.task_id));
                }
            }
        }
        Job::Train { task, protected, lambda, base } => {
            let tasks = ctx.tasks()?;
            let t = tasks.get(*task).ok_or_else(|| Error::config(format!("task index {task} out of range")))?;
            let w0 = ctx.base(base, &tasks)?;
            let adapter = match (protected, lambda) {
                (false, _) => {
                    let (a, report) = train_adapter(&w0, t, &cfg.adapter, &cfg.optimizer, None)?;
                    report.write_csv(&ctx.path("train_log.csv")?)?;
                    a
                }
                (true, Some(l)) => {
                    let trap = Trap2Config { lambda: *l, ..cfg.trap2 };
                    let (a, report) = train_adapter(&w0, t, &cfg.adapter, &cfg.optimizer, Some(&trap))?;
                    report.write_csv(&ctx.path("train_log.csv")?)?;
                    a
                }
                (true, None) => {
                    let v = super::lab::train_vanilla(cfg, &w0, t)?;
                    let vacc = w0.with_update(&v.materialize()?, 1.0)?.accuracy(&t.val)?;
                    let (a, choice) = super::lab::select_protected(cfg, &w0, t, vacc)?;
                    write_selection(&[choice], &ctx.path("lambda_selection.csv")?)?;
                    a
                }
            };
            let tag = if *protected { "trap2" } else { "none" };
            save_adapter(&adapter, &w0, &ctx.path(&format!("{}-{tag}.json", t.spec.task_id))?)?;
        }
        Job::Protect { adapter, base, kind, seed } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let a = ctx.adapter(adapter, &w0)?;
            let tr = ProtectTransform::new(*kind, *seed);
            let (out, residuals) = if kind.is_refit() {
                protect_refit(&w0, &a, &tr, a.rank)?
            } else {
                (protect_star(&a, &tr)?, vec![])
            };
            save_adapter(&out, &w0, &ctx.path(&format!("{}-{}.json", a.meta.task_id, kind.name()))?)?;
            let rows: Vec<(String, f64)> =
                out.target_layers().iter().zip(&residuals).map(|(l, r)| (l.to_string(), *r)).collect();
            write_accuracy_rows(&ctx.path("refit_residuals.csv")?, ["layer", "residual"], &rows)?;
        }
        Job::Merge { adapters, base, operator, space, coefficient, trim_keep, dare_rate, cart_fraction } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let ads: Vec<LoraAdapter> = adapters.iter().map(|p| ctx.adapter(p, &w0)).collect::<Result<_>>()?;
            let refs: Vec<&LoraAdapter> = ads.iter().collect();
            let spec = MergeSpec {
                coefficient: *coefficient,
                trim_keep: *trim_keep,
                dare_keep: 1.0 - dare_rate,
                cart_fraction: *cart_fraction,
                seed: cfg.merge.seed,
                ..MergeSpec::new(*operator)
            };
            if operator.is_data_dependent() {
                return Err(Error::config("data-dependent operators are run through gridsearch or table1"));
            }
            let merged = w0.with_update(&merge_in_space(&refs, &spec, &SpaceConfig::new(*space))?, 1.0)?;
            let (per_task, mean) = task_accuracies(&merged, &tasks, Split::Test)?;
            let mut rows: Vec<(String, f64)> = tasks.iter().map(|t| t.spec.task_id.clone()).zip(per_task).collect();
            rows.push(("average".into(), mean));
            write_accuracy_rows(&ctx.path("merge.csv")?, ["task", "accuracy"], &rows)?;
        }
        Job::SweepScale { adapter, base } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let a = ctx.adapter(adapter, &w0)?;
            let t = task_of(&tasks, &a)?;
            let u = a.materialize()?;
            scale_sweep(&w0, Update::Lora(&u), &t.test, &cfg.diagnostics.scale_grid)?
                .write_csv(&ctx.path("scale_sweep.csv")?)?;
        }
        Job::Interpolate { kappa, tau, base } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let (ak, at) = (ctx.adapter(kappa, &w0)?, ctx.adapter(tau, &w0)?);
            let (tk, tt) = (task_of(&tasks, &ak)?, task_of(&tasks, &at)?);
            let (uk, ut) = (ak.materialize()?, at.materialize()?);
            let d = interpolation_path(
                &w0,
                (&tk.spec.task_id, &uk, &tk.test),
                (&tt.spec.task_id, &ut, &tt.test),
                &cfg.diagnostics.beta_grid,
            )?;
            d.write_csv(&ctx.path("interpolation.csv")?)?;
            let mut w = csv::Writer::from_path(ctx.path("midpoint.csv")?)?;
            w.write_record(["kappa", "tau", "v_norm", "dl_mid", "dl_mid_mean", "dl_mid_max"])?;
            w.write_record([
                d.kappa.clone(),
                d.tau.clone(),
                d.v_norm.to_string(),
                d.dl_mid.to_string(),
                d.dl_mid_mean.to_string(),
                d.dl_mid_max.to_string(),
            ])?;
            w.flush()?;
        }
        Job::UniformAvg { adapter, base } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let a = ctx.adapter(adapter, &w0)?;
            let u = a.materialize()?;
            let rows: Vec<(String, f64)> = uniform_avg_proxy(&w0, Update::Lora(&u), &cfg.diagnostics.uniform_n, &task_of(&tasks, &a)?.test)?
                .into_iter()
                .map(|(n, acc)| (n.to_string(), acc))
                .collect();
            write_accuracy_rows(&ctx.path("uniform_avg.csv")?, ["n", "accuracy"], &rows)?;
        }
        Job::Gridsearch { adapters, base, operator, space } => {
            let tasks = ctx.tasks()?;
            let w0 = ctx.base(base, &tasks)?;
            let ads: Vec<LoraAdapter> = adapters.iter().map(|p| ctx.adapter(p, &w0)).collect::<Result<_>>()?;
            let refs: Vec<&LoraAdapter> = ads.iter().collect();
            let lab = Lab {
                config: cfg.clone(),
                tasks,
                w0,
                vanilla: vec![],
                protected: vec![],
                selection: vec![],
            };
            let cell = run_cell(&lab, &refs, *operator, *space)?;
            let mut w = csv::Writer::from_path(ctx.path("gridsearch_trace.csv")?)?;
            w.write_record(super::grid::GridResult::CSV_HEADER.split(','))?;
            if let Some(g) = &cell.trace {
                for p in &g.trace {
                    w.write_record([p.s.to_string(), p.metric.to_string(), p.forced.to_string()])?;
                }
            }
            w.flush()?;
            let mut rows: Vec<(String, f64)> =
                lab.tasks.iter().map(|t| t.spec.task_id.clone()).zip(cell.per_task.iter().cloned()).collect();
            rows.push(("average".into(), cell.average));
            rows.push(("best_s".into(), cell.best_s));
            write_accuracy_rows(&ctx.path("gridsearch_result.csv")?, ["key", "value"], &rows)?;
        }
        Job::VerifyTheorems => {
            let lab = Lab::build(cfg)?;
            save_lab(&lab, ctx)?;
            let report = verify_theorems(&lab)?;
            report.write_csv(&ctx.path("bounds.csv")?, &ctx.path("stationarity.csv")?)?;
        }
        Job::Table1 => {
            let lab = Lab::build(cfg)?;
            save_lab(&lab, ctx)?;
            table1(&lab)?.write_csv(&ctx.path("table1.csv")?, &ctx.path("table1_trials.csv")?)?;
        }
        Job::PairwiseMatrix => {
            let lab = Lab::build(cfg)?;
            save_lab(&lab, ctx)?;
            pairwise_matrix(&lab)?.write_csv(&ctx.path("pairwise.csv")?, &ctx.path("correlation.csv")?)?;
        }
    }
    Ok(())
}

/// Runs `job` into `dir` and writes the manifest.
pub fn execute(job: &Job, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut ctx = Ctx { cfg, dir, outputs: Vec::new() };
    run_job(job, &mut ctx)?;
    let mut outputs = BTreeMap::new();
    for name in ctx.outputs {
        let bytes = std::fs::read(dir.join(&name))?;
        outputs.insert(name, sha256_hex(&bytes));
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, job: job.clone(), config: cfg.clone(), outputs };
    let text = toml::to_string(&manifest).map_err(|e| Error::config(format!("manifest: {e}")))?;
    std::fs::write(dir.join(MANIFEST), text)?;
    Ok(manifest)
}

/// Files whose hashes differ between a manifest and its re-run.
#[derive(Debug, Clone, PartialEq)]
pub struct RerunReport {
    pub checked: usize,
    pub mismatched: Vec<String>,
}

/// Re-executes the run recorded in `manifest` into `dir` and compares every
/// output hash.
pub fn rerun(manifest: &Path, dir: &Path) -> Result<RerunReport> {
    let m = Manifest::load(manifest)?;
    let again = execute(&m.job, &m.config, dir)?;
    let mut mismatched: Vec<String> = m
        .outputs
        .iter()
        .filter(|(k, v)| again.outputs.get(*k) != Some(v))
        .map(|(k, _)| k.clone())
        .collect();
    mismatched.extend(again.outputs.keys().filter(|k| !m.outputs.contains_key(*k)).cloned());
    Ok(RerunReport { checked: m.outputs.len(), mismatched })
}
