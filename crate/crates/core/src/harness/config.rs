use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::error::{Error, Result};
use crate::mergeops::{DareInner, Operator};
use crate::spaces::Space;
use crate::tasks::{PretrainConfig, TaskSpec};
use crate::train::{AdapterConfig, LrSchedule, OptimizerConfig, Trap2Config};

use super::grid::GridSearchSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSetConfig {
    pub num_tasks: usize,
    pub base_seed: u64,
    /// `(train, val, test)` samples per task.
    pub samples_per_split: (usize, usize, usize),
    pub cluster_spread: f64,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        Self { num_tasks: 8, base_seed: 0, samples_per_split: (1024, 512, 512), cluster_spread: 0.4 }
    }
}

impl TaskSetConfig {
    pub fn task_specs(&self, num_classes: usize) -> Vec<TaskSpec> {
        (0..self.num_tasks)
            .map(|i| TaskSpec {
                num_classes,
                samples_per_split: self.samples_per_split,
                cluster_spread: self.cluster_spread,
                ..TaskSpec::default_task(i, self.base_seed)
            })
            .collect()
    }
}

/// Per-task λ selection on the validation split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSelection {
    pub grid: Vec<f64>,
    /// Largest tolerated drop in validation accuracy (points) against the
    /// vanilla adapter of the same task.
    pub max_standalone_drop: f64,
    /// Scale at which protection is measured for selection.
    pub probe_scale: f64,
}

impl Default for LambdaSelection {
    fn default() -> Self {
        Self { grid: vec![0.006, 0.008, 0.01, 0.012, 0.014, 0.017, 0.02], max_standalone_drop: 1.5, probe_scale: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProxyMode {
    #[default]
    Random,
    Stratified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeProtocol {
    pub operators: Vec<Operator>,
    pub spaces: Vec<Space>,
    pub grid: GridSearchSpec,
    pub ties_keep: Vec<f64>,
    /// DARE drop rates; the keep probability is `1 − rate`.
    pub dare_rates: Vec<f64>,
    pub dare_inner: DareInner,
    pub dare_trim_keep: f64,
    pub cart_fractions: Vec<f64>,
    pub proxy_samples: usize,
    pub proxy_mode: ProxyMode,
    pub pairwise_coefficient: f64,
    pub seed: u64,
}

impl Default for MergeProtocol {
    fn default() -> Self {
        Self {
            operators: vec![Operator::Ta, Operator::Ties, Operator::TiesDare, Operator::Tsv, Operator::Cart],
            spaces: vec![Space::Full],
            grid: GridSearchSpec::default(),
            ties_keep: (1..=10).rev().map(|k| k as f64 / 10.0).collect(),
            dare_rates: std::iter::once(1e-5).chain((1..=9).map(|k| k as f64 / 10.0)).collect(),
            dare_inner: DareInner::Ties,
            dare_trim_keep: 1.0,
            cart_fractions: vec![0.04, 0.08, 0.16, 0.32],
            proxy_samples: 100,
            proxy_mode: ProxyMode::Random,
            pairwise_coefficient: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub scale_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub uniform_n: Vec<usize>,
    pub bound_scales: Vec<f64>,
    pub stationarity_horizons: Vec<usize>,
    pub stationarity_c: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            scale_grid: vec![0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0, 1.1, 1.25, 1.5, 2.0],
            beta_grid: (0..=20).map(|k| k as f64 / 20.0).collect(),
            uniform_n: vec![1, 2, 3, 4, 6, 8],
            bound_scales: vec![0.25, 0.5],
            stationarity_horizons: vec![100, 1000, 10000],
            stationarity_c: 1.0,
        }
    }
}

/// Fully resolved experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub backbone: BackboneSpec,
    pub tasks: TaskSetConfig,
    pub pretrain: PretrainConfig,
    pub adapter: AdapterConfig,
    pub optimizer: OptimizerConfig,
    pub trap2: Trap2Config,
    pub selection: LambdaSelection,
    pub merge: MergeProtocol,
    pub diagnostics: DiagnosticsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            tasks: TaskSetConfig::default(),
            pretrain: PretrainConfig::default(),
            adapter: AdapterConfig { rank: 16, alpha: 16.0, targets: None },
            optimizer: OptimizerConfig {
                learning_rate: 3e-3,
                schedule: LrSchedule::CosineWithWarmup { warmup_steps: 100 },
                steps: 3000,
                ..OptimizerConfig::default()
            },
            trap2: Trap2Config::default(),
            selection: LambdaSelection::default(),
            merge: MergeProtocol::default(),
            diagnostics: DiagnosticsConfig::default(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML table; `value` is read as a TOML literal
/// and falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::config(format!("override key {path:?} is malformed")));
    }
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {path:?}: {k} is not a table")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Recursively overlays `top` onto `base`; tables merge, anything else
/// replaces.
fn overlay(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => overlay(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` on top of the defaults, then applies the overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        let mut table: toml::Table = Self::default().to_toml().parse().expect("defaults round-trip");
        overlay(&mut table, user);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table).try_into().map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.optimizer.validate()?;
        self.trap2.validate()?;
        if self.tasks.num_tasks == 0 {
            return Err(Error::config("at least one task is required"));
        }
        if !self.backbone.num_classes.is_multiple_of(2) {
            return Err(Error::config("tasks need an even class count"));
        }
        if self.adapter.rank == 0 {
            return Err(Error::config("adapter rank must be positive"));
        }
        if self.selection.grid.is_empty() || self.selection.grid.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::config("lambda grid must be non-empty and nonnegative"));
        }
        self.merge.grid.points()?;
        if self.merge.ties_keep.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return Err(Error::config("TIES keep ratios must lie in (0, 1]"));
        }
        if self.merge.dare_rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
            return Err(Error::config("DARE drop rates must lie in [0, 1)"));
        }
        if self.merge.proxy_samples == 0 {
            return Err(Error::config("proxy sample count must be positive"));
        }
        Ok(())
    }
}
