use serde::{Deserialize, Serialize};

/// Step-size schedule over `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup to the base rate, then cosine decay towards zero.
    CosineWithWarmup { warmup_steps: usize },
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::CosineWithWarmup { warmup_steps: 100 }
    }
}

impl LrSchedule {
    /// Rate at zero-based `step`; strictly positive for every `step < total`.
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::CosineWithWarmup { warmup_steps } => {
                if step < warmup_steps {
                    return base * (step + 1) as f64 / warmup_steps as f64;
                }
                let span = total.saturating_sub(warmup_steps).max(1) as f64;
                let progress = ((step - warmup_steps) as f64 / span).min(1.0);
                base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            if self.weight_decay != 0.0 {
                params[i] -= lr * self.weight_decay * params[i];
            }
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Either plain SGD or AdamW over a flat parameter vector.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd { weight_decay: f64 },
    Adamw(AdamState),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, weight_decay: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { weight_decay },
            OptimizerKind::Adamw => Optimizer::Adamw(AdamState::new(len, weight_decay)),
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self {
            Optimizer::Sgd { weight_decay } => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * (g + *weight_decay * *p);
                }
            }
            Optimizer::Adamw(state) => state.step(params, grad, lr),
        }
    }
}
