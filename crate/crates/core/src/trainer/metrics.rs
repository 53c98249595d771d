use std::io::Write;

use serde::Serialize;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    /// Norm of the uncompressed worker-averaged gradient.
    pub grad_norm: f64,
    /// Payload bits each worker sent this iteration.
    pub bits: u64,
    pub sim_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub iterations: u64,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// `f(θ̄) − f*` for the averaged iterate, when `f*` is known.
    pub averaged_suboptimality: Option<f64>,
    /// `f(θ_T) − f*`, when `f*` is known.
    pub final_suboptimality: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub total_bits: u64,
    pub total_sim_seconds: f64,
    pub eta: f64,
}

/// Per-iteration rows plus an end-of-run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    pub summary: RunSummary,
    /// `θ̄ = (1/T) Σ_{t=1..T} θ_t`.
    pub averaged_iterate: Vec<f64>,
    pub final_iterate: Vec<f64>,
}

impl MetricsLog {
    pub fn losses(&self) -> impl Iterator<Item = f64> + '_ {
        self.rows.iter().map(|r| r.loss)
    }

    /// Loss of the last logged row at or before `iteration`.
    pub fn loss_at(&self, iteration: u64) -> Option<f64> {
        self.rows.iter().take_while(|r| r.iteration <= iteration).last().map(|r| r.loss)
    }

    /// `iteration,loss,grad_norm,bits,sim_seconds` followed by one
    /// `# summary` comment line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "iteration,loss,grad_norm,bits,sim_seconds")?;
        for r in &self.rows {
            writeln!(out, "{},{:e},{:e},{},{:e}", r.iteration, r.loss, r.grad_norm, r.bits, r.sim_seconds)?;
        }
        let s = &self.summary;
        let opt = |x: Option<f64>| x.map_or_else(|| "na".to_string(), |v| format!("{v:e}"));
        writeln!(
            out,
            "# summary iterations={} final_loss={:e} averaged_suboptimality={} final_suboptimality={} \
             final_accuracy={} total_bits={} sim_seconds={:e} eta={:e}",
            s.iterations,
            s.final_loss,
            opt(s.averaged_suboptimality),
            opt(s.final_suboptimality),
            opt(s.final_accuracy),
            s.total_bits,
            s.total_sim_seconds,
            s.eta
        )?;
        Ok(())
    }
}
