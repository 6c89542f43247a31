use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Merging-coefficient sweep `start, start + step, …, max` with early
/// stopping after `patience` consecutive non-improving points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearchSpec {
    pub start: f64,
    pub step: f64,
    pub max: f64,
    pub patience: usize,
    /// Evaluated after the sweep if the sweep stopped before reaching them.
    pub always_include: Vec<f64>,
}

impl Default for GridSearchSpec {
    fn default() -> Self {
        Self { start: 0.1, step: 0.1, max: 10.0, patience: 10, always_include: vec![1.0] }
    }
}

pub const MAX_GRID_POINTS: usize = 100;

fn tidy(x: f64) -> f64 {
    (x * 1e10).round() / 1e10
}

impl GridSearchSpec {
    pub fn points(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0 && self.start.is_finite() && self.max.is_finite()) {
            return Err(Error::config("grid search needs finite start/max and a positive step"));
        }
        if self.max < self.start {
            return Err(Error::Empty("coefficient grid".into()));
        }
        if self.patience == 0 {
            return Err(Error::config("grid search patience must be positive"));
        }
        let n = ((self.max - self.start) / self.step + 1e-9).floor() as usize + 1;
        if n > MAX_GRID_POINTS {
            return Err(Error::config(format!("coefficient grid has {n} points, limit is {MAX_GRID_POINTS}")));
        }
        Ok((0..n).map(|i| tidy(self.start + i as f64 * self.step)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub s: f64,
    pub metric: f64,
    pub forced: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridResult {
    pub best_s: f64,
    pub best_metric: f64,
    pub trace: Vec<GridPoint>,
}

impl GridResult {
    pub const CSV_HEADER: &'static str = "s,metric,forced";
}

/// Sequential sweep maximising `objective`; ties go to the smaller
/// coefficient.
pub fn grid_search_coefficient(spec: &GridSearchSpec, mut objective: impl FnMut(f64) -> Result<f64>) -> Result<GridResult> {
    let grid = spec.points()?;
    let mut trace: Vec<GridPoint> = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut since = 0;
    let mut eval = |s: f64, forced: bool, trace: &mut Vec<GridPoint>| -> Result<f64> {
        let m = objective(s)?;
        if !m.is_finite() {
            return Err(Error::NonFinite(format!("grid-search metric at s = {s}")));
        }
        trace.push(GridPoint { s, metric: m, forced });
        Ok(m)
    };
    for &s in &grid {
        let m = eval(s, false, &mut trace)?;
        match best {
            Some((_, bm)) if m <= bm => since += 1,
            _ => {
                best = Some((s, m));
                since = 0;
            }
        }
        if since >= spec.patience {
            break;
        }
    }
    for &f in &spec.always_include {
        let f = tidy(f);
        if trace.iter().any(|p| p.s == f) {
            continue;
        }
        let m = eval(f, true, &mut trace)?;
        let (bs, bm) = best.expect("grid has at least one point");
        if m > bm || (m == bm && f < bs) {
            best = Some((f, m));
        }
    }
    let (best_s, best_metric) = best.expect("grid has at least one point");
    Ok(GridResult { best_s, best_metric, trace })
}
