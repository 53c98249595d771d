//! `gradcomp train`: repeated runs of one task under several schemes.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gradcomp::collectives::CostModel;
use gradcomp::trainer::{MetricsLog, NormSource, StepSize, Task, TaskSpec, TrainConfig, Trainer};
use gradcomp::{Error as LibError, SchemeDescriptor};
use serde::Deserialize;

use crate::scheme::SchemeSpec;
use crate::UsageError;

fn default_repeats() -> usize {
    5
}

fn default_log_every() -> u64 {
    1
}

/// Experiment file: one task, one optimizer setting, several schemes.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentFile {
    pub task: TaskSpec,
    pub workers: usize,
    pub iterations: u64,
    pub step_size: StepSize,
    #[serde(rename = "scheme")]
    pub schemes: Vec<SchemeSpec>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Run `i` uses seed `seed + i` unless `seeds` lists them explicitly.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub norm_source: NormSource,
    #[serde(default)]
    pub cost: CostModel,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

/// What to run and where the files go.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Default)]
pub struct Overrides {
    pub scheme: Option<SchemeSpec>,
    pub repeats: Option<usize>,
    pub seeds: Option<Vec<u64>>,
    pub iterations: Option<u64>,
    pub workers: Option<usize>,
}

pub fn load(path: &Path) -> Result<ExperimentFile> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    // The parser's message carries the line, column and an excerpt.
    toml::from_str(&text).map_err(|e| UsageError(format!("invalid config {}:\n{e}", path.display())).into())
}

/// Apply overrides and resolve the seed list.
pub fn manifest(
    file: &mut ExperimentFile,
    config_path: &Path,
    out_dir: &Path,
    overrides: Overrides,
) -> Result<RunManifest> {
    if let Some(s) = overrides.scheme {
        file.schemes = vec![s];
    }
    if let Some(t) = overrides.iterations {
        file.iterations = t;
    }
    if let Some(w) = overrides.workers {
        file.workers = w;
    }
    if let Some(r) = overrides.repeats {
        file.repeats = r;
        file.seeds = None;
    }
    if let Some(s) = overrides.seeds {
        file.seeds = Some(s);
    }
    let seeds = match &file.seeds {
        Some(s) => s.clone(),
        None => (0..file.repeats as u64).map(|i| file.seed + i).collect(),
    };
    if seeds.is_empty() {
        return Err(UsageError("repeats must be >= 1".into()).into());
    }
    let mut dedup = seeds.clone();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != seeds.len() {
        return Err(UsageError(format!("seeds must be distinct, got {seeds:?}")).into());
    }
    if file.schemes.is_empty() {
        return Err(UsageError(format!("config {} lists no [[scheme]]", config_path.display())).into());
    }
    Ok(RunManifest { config_path: config_path.to_path_buf(), out_dir: out_dir.to_path_buf(), seeds })
}

fn train_config(file: &ExperimentFile, scheme: SchemeDescriptor, seed: u64) -> TrainConfig {
    TrainConfig {
        task: file.task.clone(),
        scheme,
        workers: file.workers,
        iterations: file.iterations,
        step_size: file.step_size,
        seed,
        norm_source: file.norm_source,
        cost: file.cost,
        log_every: file.log_every,
    }
}

/// Outcome of one (scheme, seed) run.
struct RunResult {
    seed: u64,
    log: Option<MetricsLog>,
}

pub struct TrainReport {
    pub files: Vec<PathBuf>,
    pub diverged: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt_opt(x: f64) -> String {
    if x.is_nan() {
        "na".into()
    } else {
        format!("{x:e}")
    }
}

/// Run every (scheme, seed) pair and write the CSVs.
pub fn run(file: &ExperimentFile, manifest: &RunManifest, verbose: bool) -> Result<TrainReport> {
    let task: Task = file.task.build().map_err(|e| UsageError(format!("config {}: {e}", manifest.config_path.display())))?;
    let dim = task.dim();
    let schemes = file
        .schemes
        .iter()
        .map(|s| s.descriptor(dim))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| UsageError(format!("config {}: {e:#}", manifest.config_path.display())))?;
    // Reject bad settings before any run starts.
    for scheme in &schemes {
        Trainer::with_task(train_config(file, scheme.clone(), manifest.seeds[0]), task.clone())
            .map_err(|e| UsageError(format!("config {}: {e}", manifest.config_path.display())))?;
    }
    fs::create_dir_all(&manifest.out_dir)
        .with_context(|| format!("cannot create output directory {}", manifest.out_dir.display()))?;

    let mut files = Vec::new();
    let mut diverged = 0;
    let mut summary: Vec<(String, Vec<RunResult>)> = Vec::new();
    for scheme in &schemes {
        let label = scheme.label();
        let mut results = Vec::new();
        for &seed in &manifest.seeds {
            let trainer = Trainer::with_task(train_config(file, scheme.clone(), seed), task.clone())?;
            match trainer.run() {
                Ok(log) => {
                    let path = manifest.out_dir.join(format!("{label}-seed{seed}.csv"));
                    let f = File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
                    log.write_csv(BufWriter::new(f))?;
                    if verbose {
                        eprintln!(
                            "{label} seed {seed}: final loss {:.6e}, {} bits/iteration",
                            log.summary.final_loss,
                            log.summary.total_bits / log.summary.iterations.max(1)
                        );
                    }
                    files.push(path);
                    results.push(RunResult { seed, log: Some(log) });
                }
                Err(e @ LibError::Diverged { .. }) => {
                    eprintln!("{label} seed {seed}: {e}");
                    diverged += 1;
                    results.push(RunResult { seed, log: None });
                }
                Err(e) => return Err(e.into()),
            }
        }
        summary.push((label, results));
    }
    let path = manifest.out_dir.join("summary.csv");
    write_summary(&path, &summary)?;
    files.push(path);
    Ok(TrainReport { files, diverged })
}

fn write_summary(path: &Path, rows: &[(String, Vec<RunResult>)]) -> Result<()> {
    use std::io::Write;
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("cannot write {}", path.display()))?);
    writeln!(
        out,
        "scheme,runs,diverged,seeds,final_loss_mean,final_loss_std,averaged_suboptimality_mean,\
         averaged_suboptimality_std,final_accuracy_mean,final_accuracy_std,bits_per_iteration,sim_seconds_mean"
    )?;
    for (label, results) in rows {
        let logs: Vec<&MetricsLog> = results.iter().filter_map(|r| r.log.as_ref()).collect();
        let collect = |f: &dyn Fn(&MetricsLog) -> Option<f64>| -> Vec<f64> { logs.iter().filter_map(|l| f(l)).collect() };
        let (loss_m, loss_s) = mean_std(&collect(&|l| Some(l.summary.final_loss)));
        let (sub_m, sub_s) = mean_std(&collect(&|l| l.summary.averaged_suboptimality));
        let (acc_m, acc_s) = mean_std(&collect(&|l| l.summary.final_accuracy));
        let (sim_m, _) = mean_std(&collect(&|l| Some(l.summary.total_sim_seconds)));
        let bits = logs.first().map_or(0, |l| l.summary.total_bits / l.summary.iterations.max(1));
        let seeds: Vec<String> = results.iter().map(|r| r.seed.to_string()).collect();
        writeln!(
            out,
            "{label},{},{},{},{},{},{},{},{},{},{bits},{}",
            results.len(),
            results.len() - logs.len(),
            seeds.join(" "),
            fmt_opt(loss_m),
            fmt_opt(loss_s),
            fmt_opt(sub_m),
            fmt_opt(sub_s),
            fmt_opt(acc_m),
            fmt_opt(acc_s),
            fmt_opt(sim_m)
        )?;
    }
    out.flush()?;
    Ok(())
}
