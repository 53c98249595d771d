//! Data-parallel SGD over a simulated worker group.
//!
//! Each iteration every worker computes a stochastic gradient at its own
//! replica of θ, the gradients are compressed and reduced with
//! [`compress_and_reduce`], and every worker decodes the shared aggregate
//! and applies it to its replica. Replicas therefore stay bitwise equal.

mod config;
mod metrics;
mod pipeline;
mod task;

pub use config::{NormSource, ResolvedStep, StepSize, TrainConfig};
pub use metrics::{MetricsLog, MetricsRow, RunSummary};
pub use pipeline::{compress_and_reduce, Aggregate, Reduced, RoundContext};
pub use task::{Logistic, Quadratic, Task, TaskSpec, TinyMlp};

use crate::collectives::{CostLedger, WorkerGroup};
use crate::error::{Error, Result};
use crate::rng::{mix64, QuantRng};

/// Loss growth over the initial value that counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Live training state.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    task: Task,
    group: WorkerGroup,
    step: ResolvedStep,
    theta0: Vec<f64>,
    replicas: Vec<Vec<f64>>,
    iterate_sum: Vec<f64>,
    iteration: u64,
    initial_loss: f64,
    last_grad_norm: f64,
    grads: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let task = config.task.build()?;
        Self::with_task(config, task)
    }

    /// Train on an already-built task; `config.task` is ignored.
    pub fn with_task(config: TrainConfig, task: Task) -> Result<Self> {
        let dim = task.dim();
        config.validate(dim)?;
        let theta0 = task.initial_point();
        let step = config.step_size.resolve(&task, &theta0, config.workers, config.iterations)?;
        let group = WorkerGroup::new(config.workers, config.cost)?;
        let initial_loss = task.loss(&theta0);
        Ok(Self {
            replicas: vec![theta0.clone(); config.workers],
            iterate_sum: vec![0.0; dim],
            grads: vec![vec![0.0; dim]; config.workers],
            theta0,
            step,
            group,
            task,
            config,
            iteration: 0,
            initial_loss,
            last_grad_norm: 0.0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn eta(&self) -> f64 {
        self.step.eta
    }

    pub fn projection_radius(&self) -> Option<f64> {
        self.step.projection_radius
    }

    /// Number of completed steps.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Worker 0's parameters.
    pub fn theta(&self) -> &[f64] {
        &self.replicas[0]
    }

    pub fn replicas(&self) -> &[Vec<f64>] {
        &self.replicas
    }

    /// Largest `|θᵐ_i − θ⁰_i|` between any worker's replica and worker 0's.
    pub fn replica_spread(&self) -> f64 {
        let base = &self.replicas[0];
        self.replicas
            .iter()
            .flat_map(|r| r.iter().zip(base).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max)
    }

    pub fn ledger(&self) -> &CostLedger {
        self.group.ledger()
    }

    /// `(1/t) Σ_{i=1..t} θ_i` over the steps taken so far.
    pub fn averaged_iterate(&self) -> Vec<f64> {
        let t = self.iteration.max(1) as f64;
        self.iterate_sum.iter().map(|x| x / t).collect()
    }

    fn round_context(&self) -> RoundContext {
        RoundContext {
            quant_rng: QuantRng::new(mix64(self.config.seed ^ 0x0051_5347)),
            shared_seed: mix64(self.config.seed ^ 0x0052_414e),
            iteration: self.iteration,
            norm_source: self.config.norm_source,
        }
    }

    /// One step using each worker's stochastic gradient.
    pub fn step(&mut self) -> Result<()> {
        let mut grads = std::mem::take(&mut self.grads);
        for (m, g) in grads.iter_mut().enumerate() {
            self.task.stochastic_gradient(
                &self.replicas[m],
                self.config.seed,
                m,
                self.config.workers,
                self.iteration,
                g,
            );
        }
        let result = self.step_with_gradients(&grads);
        self.grads = grads;
        result
    }

    /// One step with caller-supplied per-worker gradients.
    pub fn step_with_gradients<G: AsRef<[f64]>>(&mut self, grads: &[G]) -> Result<()> {
        let dim = self.theta0.len();
        if grads.len() != self.config.workers || grads.iter().any(|g| g.as_ref().len() != dim) {
            return Err(Error::contract(format!(
                "expected {} gradients of length {dim}",
                self.config.workers
            )));
        }
        for g in grads {
            if g.as_ref().iter().any(|x| !x.is_finite()) {
                return Err(self.diverged(f64::NAN));
            }
        }
        let m = self.config.workers as f64;
        self.last_grad_norm = (0..dim)
            .map(|i| {
                let avg = grads.iter().map(|g| g.as_ref()[i]).sum::<f64>() / m;
                avg * avg
            })
            .sum::<f64>()
            .sqrt();
        let ctx = self.round_context();
        let reduced = compress_and_reduce(&mut self.group, &self.config.scheme, grads, &ctx)?;
        let eta = self.step.eta;
        for replica in &mut self.replicas {
            // Each worker decodes the shared aggregate independently.
            let update = reduced.decode()?;
            for (t, u) in replica.iter_mut().zip(&update) {
                *t -= eta * u;
            }
            if let Some(r) = self.step.projection_radius {
                project_onto_ball(replica, &self.theta0, r);
            }
        }
        for (s, t) in self.iterate_sum.iter_mut().zip(&self.replicas[0]) {
            *s += t;
        }
        self.iteration += 1;
        Ok(())
    }

    fn diverged(&self, loss: f64) -> Error {
        Error::Diverged {
            iteration: self.iteration as usize,
            loss,
            limit: DIVERGENCE_FACTOR * self.initial_loss.abs(),
        }
    }

    fn row(&self, loss: f64) -> MetricsRow {
        let t = self.iteration;
        MetricsRow {
            iteration: t,
            loss,
            grad_norm: self.last_grad_norm,
            bits: if t == 0 { 0 } else { self.group.ledger().payload_bits(t - 1) },
            sim_seconds: if t == 0 { 0.0 } else { self.group.ledger().sim_seconds(t - 1) },
        }
    }

    /// Run the configured number of iterations. The full loss is evaluated
    /// on logged iterations only, so divergence by loss growth is detected
    /// there; non-finite gradients are caught every step.
    pub fn run(mut self) -> Result<MetricsLog> {
        let limit = DIVERGENCE_FACTOR * self.initial_loss.abs().max(f64::MIN_POSITIVE);
        let mut rows = vec![self.row(self.initial_loss)];
        let total = self.config.iterations;
        while self.iteration < total {
            self.step()?;
            if self.iteration.is_multiple_of(self.config.log_every) || self.iteration == total {
                let loss = self.task.loss(self.theta());
                if !loss.is_finite() || loss > limit {
                    return Err(self.diverged(loss));
                }
                rows.push(self.row(loss));
            }
        }
        Ok(self.finish(rows))
    }

    fn finish(self, rows: Vec<MetricsRow>) -> MetricsLog {
        let averaged = self.averaged_iterate();
        let final_iterate = self.theta().to_vec();
        let fstar = self.task.optimal_value();
        let final_loss = rows.last().map_or(self.initial_loss, |r| r.loss);
        let summary = RunSummary {
            iterations: self.iteration,
            initial_loss: self.initial_loss,
            final_loss,
            averaged_suboptimality: fstar.map(|f| self.task.loss(&averaged) - f),
            final_suboptimality: fstar.map(|f| final_loss - f),
            final_accuracy: self.task.accuracy(&final_iterate),
            total_bits: (0..self.iteration).map(|t| self.group.ledger().payload_bits(t)).sum(),
            total_sim_seconds: self.group.ledger().total_sim_seconds(),
            eta: self.step.eta,
        };
        MetricsLog { rows, summary, averaged_iterate: averaged, final_iterate }
    }
}

/// Euclidean projection onto `‖θ − center‖ ≤ radius`.
pub fn project_onto_ball(theta: &mut [f64], center: &[f64], radius: f64) {
    let d2: f64 = theta.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
    if d2 > radius * radius {
        let f = radius / d2.sqrt();
        for (t, c) in theta.iter_mut().zip(center) {
            *t = c + (*t - c) * f;
        }
    }
}

/// Build the task, run it, and return the metrics.
pub fn train(config: TrainConfig) -> Result<MetricsLog> {
    Trainer::new(config)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collectives::CostModel;
    use crate::types::{Quantizer, ScaleSet, SchemeDescriptor};

    fn quad_config(scheme: SchemeDescriptor, workers: usize, iterations: u64, noise: f64) -> TrainConfig {
        TrainConfig {
            task: TaskSpec::Quadratic { dim: 8, lambda_min: 1.0, lambda_max: 4.0, noise_sigma: noise, data_seed: 1 },
            scheme,
            workers,
            iterations,
            step_size: StepSize::Constant { eta: 0.2 },
            seed: 3,
            norm_source: NormSource::Subvector,
            cost: CostModel::default(),
            log_every: 1,
        }
    }

    #[test]
    fn projection() {
        let mut t = vec![3.0, 4.0];
        project_onto_ball(&mut t, &[0.0, 0.0], 1.0);
        assert!((t[0] - 0.6).abs() < 1e-15 && (t[1] - 0.8).abs() < 1e-15);
        let mut inside = vec![0.1, 0.1];
        project_onto_ball(&mut inside, &[0.0, 0.0], 1.0);
        assert_eq!(inside, vec![0.1, 0.1]);
    }

    #[test]
    fn replicas_stay_identical() {
        let mut tr = Trainer::new(quad_config(SchemeDescriptor::QsgdMaxNorm { s: 4 }, 3, 20, 0.5)).unwrap();
        for _ in 0..20 {
            tr.step().unwrap();
            assert_eq!(tr.replica_spread(), 0.0);
        }
    }

    #[test]
    fn zero_gradients_leave_theta_unchanged() {
        let scheme = SchemeDescriptor::QsgdMaxNormMultiScale { scales: ScaleSet::new(vec![2, 8]).unwrap() };
        let mut tr = Trainer::new(quad_config(scheme, 2, 1, 0.0)).unwrap();
        let before = tr.theta().to_vec();
        tr.step_with_gradients(&[vec![0.0; 8], vec![0.0; 8]]).unwrap();
        assert_eq!(tr.theta(), before.as_slice());
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut tr = Trainer::new(quad_config(SchemeDescriptor::Uncompressed, 1, 1, 0.0)).unwrap();
        let mut g = vec![0.0; 8];
        g[3] = f64::INFINITY;
        assert!(matches!(tr.step_with_gradients(&[g]), Err(Error::Diverged { .. })));
    }

    #[test]
    fn divergence_is_detected() {
        let mut cfg = quad_config(SchemeDescriptor::Uncompressed, 1, 200, 0.0);
        cfg.step_size = StepSize::Constant { eta: 1.0 };
        assert!(matches!(train(cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn theorem_step_size() {
        let mut cfg = quad_config(SchemeDescriptor::Uncompressed, 4, 200, 0.0);
        cfg.step_size = StepSize::Theorem1 { sigma: 2.0, radius: Some(1.5), smoothness: None };
        let tr = Trainer::new(cfg.clone()).unwrap();
        let gamma = 1.5 / 2.0 * (2.0f64 / 200.0).sqrt();
        assert!((tr.eta() - 1.0 / (4.0 + 1.0 / gamma)).abs() < 1e-15);
        cfg.step_size = StepSize::Corollary1 { sigma: 2.0, radius: Some(1.5), smoothness: None };
        let tr = Trainer::new(cfg).unwrap();
        assert!((tr.eta() - 1.0 / (4.0 + 2.0 / gamma)).abs() < 1e-15);
        assert_eq!(tr.projection_radius(), Some(1.5));
    }

    #[test]
    fn randk_inner_multiscale_runs() {
        let scheme = SchemeDescriptor::GlobalRandK {
            k: 3,
            inner: Quantizer::MultiScale { scales: ScaleSet::new(vec![4, 16]).unwrap() },
        };
        let log = train(quad_config(scheme, 2, 50, 0.1)).unwrap();
        assert_eq!(log.rows.len(), 51);
        assert!(log.summary.final_loss < log.summary.initial_loss);
    }

    #[test]
    fn csv_has_header_rows_and_summary() {
        let log = train(quad_config(SchemeDescriptor::QsgdMaxNorm { s: 8 }, 2, 5, 0.0)).unwrap();
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,loss,grad_norm,bits,sim_seconds");
        assert_eq!(lines.len(), 1 + 6 + 1);
        assert!(lines[7].starts_with("# summary "));
        // 32-bit norm plus 8 coordinates at 4 bits
        assert!(lines[2].contains(&format!(",{},", 32 + 8 * 4)));
    }
}
