use serde::{Deserialize, Serialize};

use crate::collectives::CostModel;
use crate::error::{Error, Result};
use crate::types::SchemeDescriptor;

use super::task::{Task, TaskSpec};

/// Where the max-norm is taken when the gradient is sparsified first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormSource {
    /// Norm of the gathered K-subvector (tighter grid).
    #[default]
    Subvector,
    /// Norm of the full local gradient.
    FullGradient,
}

/// Learning-rate rule. The theorem-driven rules also enable projection onto
/// the ball `‖θ − θ₀‖ ≤ radius`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum StepSize {
    Constant {
        eta: f64,
    },
    /// `η = 1 / (L + 1/γ)`, `γ = (R/σ)·sqrt(2/T)`.
    Theorem1 {
        sigma: f64,
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default)]
        smoothness: Option<f64>,
    },
    /// `η = 1 / (L + sqrt(M)/γ)`, same `γ`.
    Corollary1 {
        sigma: f64,
        #[serde(default)]
        radius: Option<f64>,
        #[serde(default)]
        smoothness: Option<f64>,
    },
}

/// Step size and optional projection radius resolved against a task.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedStep {
    pub eta: f64,
    pub projection_radius: Option<f64>,
}

impl StepSize {
    pub fn resolve(&self, task: &Task, theta0: &[f64], workers: usize, iterations: u64) -> Result<ResolvedStep> {
        let (sigma, radius, smoothness, sqrt_m) = match *self {
            StepSize::Constant { eta } => {
                if !(eta > 0.0 && eta.is_finite()) {
                    return Err(Error::config(format!("step size must be positive, got {eta}")));
                }
                return Ok(ResolvedStep { eta, projection_radius: None });
            }
            StepSize::Theorem1 { sigma, radius, smoothness } => (sigma, radius, smoothness, 1.0),
            StepSize::Corollary1 { sigma, radius, smoothness } => {
                (sigma, radius, smoothness, (workers as f64).sqrt())
            }
        };
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::config("sigma must be finite and >= 0"));
        }
        let l = smoothness.or_else(|| task.smoothness()).ok_or_else(|| {
            Error::config("the task has no known smoothness constant; set step_size.smoothness")
        })?;
        let r = match radius {
            Some(r) => r,
            None => {
                let opt = task.optimum().ok_or_else(|| {
                    Error::config("the task has no known optimum; set step_size.radius")
                })?;
                opt.iter().zip(theta0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
            }
        };
        if !(l > 0.0 && l.is_finite() && r > 0.0 && r.is_finite()) {
            return Err(Error::config(format!("need positive smoothness and radius, got L = {l}, R = {r}")));
        }
        // 1/γ = σ / (R·sqrt(2/T))
        let inv_gamma = sigma / (r * (2.0 / iterations as f64).sqrt());
        Ok(ResolvedStep { eta: 1.0 / (l + sqrt_m * inv_gamma), projection_radius: Some(r) })
    }
}

fn default_log_every() -> u64 {
    1
}

/// Complete description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskSpec,
    pub scheme: SchemeDescriptor,
    pub workers: usize,
    pub iterations: u64,
    pub step_size: StepSize,
    /// Drives gradient noise, minibatches, rounding and coordinate selection.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub norm_source: NormSource,
    #[serde(default)]
    pub cost: CostModel,
    /// Write a metrics row every this many iterations (the last is always written).
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

impl TrainConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::config("workers must be >= 1"));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be >= 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be >= 1"));
        }
        self.cost.validate()?;
        self.scheme.validate(dim)
    }
}
