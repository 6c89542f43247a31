use serde::Serialize;

use crate::backbone::{LoraAdapter, Weights};
use crate::error::Result;
use crate::tasks::{generate_task, pretrain_base, TaskData};
use crate::train::{train_adapter, Trap2Config};

use super::config::ExperimentConfig;

/// Outcome of the per-task λ search on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LambdaChoice {
    pub task_id: String,
    pub lambda: f64,
    pub vanilla_val_acc: f64,
    pub val_acc: f64,
    pub val_acc_probe: f64,
    /// Number of grid values within the standalone tolerance.
    pub eligible: usize,
}

impl LambdaChoice {
    pub const CSV_HEADER: &'static str = "task,lambda,vanilla_val_acc,val_acc,val_acc_probe,eligible";
}

/// Base model, tasks and both adapter families for one configuration.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: ExperimentConfig,
    pub tasks: Vec<TaskData>,
    pub w0: Weights,
    pub vanilla: Vec<LoraAdapter>,
    pub protected: Vec<LoraAdapter>,
    pub selection: Vec<LambdaChoice>,
}

pub fn build_tasks(cfg: &ExperimentConfig) -> Result<Vec<TaskData>> {
    cfg.tasks
        .task_specs(cfg.backbone.num_classes)
        .iter()
        .map(|s| generate_task(s, cfg.backbone.input_dim))
        .collect()
}

pub fn build_base(cfg: &ExperimentConfig, tasks: &[TaskData]) -> Result<Weights> {
    pretrain_base(tasks, &cfg.backbone, &cfg.pretrain)
}

pub fn train_vanilla(cfg: &ExperimentConfig, w0: &Weights, task: &TaskData) -> Result<LoraAdapter> {
    Ok(train_adapter(w0, task, &cfg.adapter, &cfg.optimizer, None)?.0)
}

pub fn train_protected(cfg: &ExperimentConfig, w0: &Weights, task: &TaskData, lambda: f64) -> Result<LoraAdapter> {
    let trap = Trap2Config { lambda, ..cfg.trap2 };
    Ok(train_adapter(w0, task, &cfg.adapter, &cfg.optimizer, Some(&trap))?.0)
}

/// Trains one protected adapter per grid value and keeps the one with the
/// largest validation drop at the probe scale among those within the
/// standalone tolerance. Without any eligible value the most accurate one
/// is kept.
pub fn select_protected(
    cfg: &ExperimentConfig,
    w0: &Weights,
    task: &TaskData,
    vanilla_val_acc: f64,
) -> Result<(LoraAdapter, LambdaChoice)> {
    let sel = &cfg.selection;
    let floor = vanilla_val_acc - sel.max_standalone_drop / 100.0;
    let mut best: Option<(bool, f64, LoraAdapter, LambdaChoice)> = None;
    let mut eligible = 0;
    for &lambda in &sel.grid {
        let a = train_protected(cfg, w0, task, lambda)?;
        let u = a.materialize()?;
        let acc = w0.with_update(&u, 1.0)?.accuracy(&task.val)?;
        let probe = w0.with_update(&u, sel.probe_scale)?.accuracy(&task.val)?;
        let ok = acc >= floor;
        eligible += usize::from(ok);
        let score = if ok { acc - probe } else { acc };
        let better = match &best {
            None => true,
            Some((bok, bscore, _, _)) => (ok && !bok) || (ok == *bok && score > *bscore),
        };
        log::debug!("{} λ={lambda}: val acc {acc:.4}, at probe {probe:.4}", task.spec.task_id);
        if better {
            let choice = LambdaChoice {
                task_id: task.spec.task_id.clone(),
                lambda,
                vanilla_val_acc,
                val_acc: acc,
                val_acc_probe: probe,
                eligible: 0,
            };
            best = Some((ok, score, a, choice));
        }
    }
    let (_, _, a, mut choice) = best.expect("lambda grid is non-empty");
    choice.eligible = eligible;
    Ok((a, choice))
}

impl Lab {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let tasks = build_tasks(cfg)?;
        let w0 = build_base(cfg, &tasks)?;
        let mut vanilla = Vec::new();
        let mut protected = Vec::new();
        let mut selection = Vec::new();
        for task in &tasks {
            let v = train_vanilla(cfg, &w0, task)?;
            let vacc = w0.with_update(&v.materialize()?, 1.0)?.accuracy(&task.val)?;
            let (p, choice) = select_protected(cfg, &w0, task, vacc)?;
            log::info!(
                "{}: vanilla {:.4}, λ = {} gives {:.4} ({:.4} at s = {})",
                task.spec.task_id,
                vacc,
                choice.lambda,
                choice.val_acc,
                choice.val_acc_probe,
                cfg.selection.probe_scale
            );
            vanilla.push(v);
            protected.push(p);
            selection.push(choice);
        }
        Ok(Self { config: cfg.clone(), tasks, w0, vanilla, protected, selection })
    }

    pub fn task_index(&self, task_id: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.spec.task_id == task_id)
    }
}
