//! `gradcomp`: training runs, verification suites, compression benchmarks
//! and throughput projections.
//!
//! Exit codes: 0 success, 1 failure (divergence, failed checks, I/O),
//! 2 usage (bad flags, missing or invalid config).

mod bench;
mod perf;
mod scheme;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use gradcomp::collectives::LinkProfile;
use gradcomp::perfmodel::{ClusterSpec, DEFAULT_WORKER_COUNTS};
use gradcomp::trainer::NormSource;
use gradcomp::verify::{self, OperatingPoint, Suite, VerifyOptions};

use scheme::{Bits, SchemeName, SchemeSpec};

/// An error caused by the invocation rather than by the run itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "gradcomp", version, about = "All-reduce compatible gradient compression toolkit")]
struct Cli {
    /// Print the scheme names and the bits-to-levels table, then exit.
    #[arg(long)]
    explain_schemes: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a task under one or more schemes, repeated over seeds.
    Train(TrainArgs),
    /// Run the statistical and exactness suites.
    Verify(VerifyArgs),
    /// Time one compression round on random gradients.
    BenchCompress(BenchArgs),
    /// Project throughput over worker counts for model profiles.
    PerfModel(PerfArgs),
}

#[derive(Args)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "GRADCOMP_OUT_DIR", default_value = "gradcomp-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    out: OutDir,
    /// Train only this scheme instead of the ones in the file.
    #[arg(long)]
    scheme: Option<SchemeName>,
    /// Bits per coordinate for --scheme; a comma list for two-scale schemes.
    #[arg(long, requires = "scheme")]
    bits: Option<Bits>,
    /// Coordinates kept by --scheme grandk-*.
    #[arg(long, requires = "scheme")]
    k: Option<usize>,
    /// Number of runs, with seeds base, base+1, ...
    #[arg(long, conflicts_with = "seeds")]
    repeats: Option<usize>,
    /// Explicit comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Print one line per finished run.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Suites to run (default: all).
    #[arg(long = "suite", value_parser = parse_suite)]
    suites: Vec<Suite>,
    /// Monte-Carlo draws per operating point (and rand-k iterations).
    #[arg(long, default_value_t = VerifyOptions::default().samples)]
    samples: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Operating points as n:s pairs, e.g. 10:2,1000:16.
    #[arg(long, value_delimiter = ',', value_parser = parse_point)]
    points: Option<Vec<OperatingPoint>>,
    #[arg(long, default_value_t = VerifyOptions::default().commutativity_cases)]
    commutativity_cases: u64,
    /// Workers in the commutativity suite.
    #[arg(long, default_value_t = VerifyOptions::default().commutativity_workers)]
    workers: usize,
    #[arg(long, default_value_t = VerifyOptions::default().packing_trials)]
    packing_trials: u64,
    /// Normalizer of the sparsified variance check: subvector or full-gradient.
    #[arg(long, default_value = "subvector", value_parser = parse_norm_source)]
    norm_source: NormSource,
}

#[derive(Args)]
struct BenchArgs {
    /// Scheme as name[:bits[:k]], e.g. qsgd-mn:4.
    #[arg(long, default_value = "qsgd-mn:4")]
    scheme: SchemeSpec,
    /// Gradient dimension.
    #[arg(long, short, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 5)]
    iterations: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PerfArgs {
    /// resnet50-like, vgg16-like, or a profile TOML file (default: both shipped profiles).
    #[arg(long = "profile")]
    profiles: Vec<String>,
    /// Cluster TOML file; overrides --gbps and --gpus-per-node.
    #[arg(long)]
    cluster: Option<PathBuf>,
    /// Inter-node Ethernet bandwidth.
    #[arg(long, default_value_t = 1.0)]
    gbps: f64,
    #[arg(long, default_value_t = 4)]
    gpus_per_node: usize,
    /// Worker counts to sweep.
    #[arg(long, value_delimiter = ',')]
    workers: Option<Vec<usize>>,
    /// Schemes as name[:bits[:k]] (default: a representative set).
    #[arg(long = "scheme")]
    schemes: Vec<SchemeSpec>,
    #[command(flatten)]
    out: OutDir,
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    s.parse().map_err(|e: gradcomp::Error| e.to_string())
}

fn parse_point(s: &str) -> Result<OperatingPoint, String> {
    let (n, scale) = s.split_once(':').ok_or_else(|| format!("expected n:s, got {s:?}"))?;
    let n = n.parse().map_err(|_| format!("bad dimension in {s:?}"))?;
    let s = scale.parse().map_err(|_| format!("bad scale in {s:?}"))?;
    Ok(OperatingPoint { n, s })
}

fn parse_norm_source(s: &str) -> Result<NormSource, String> {
    match s {
        "subvector" => Ok(NormSource::Subvector),
        "full-gradient" => Ok(NormSource::FullGradient),
        other => Err(format!("expected subvector or full-gradient, got {other:?}")),
    }
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode> {
    let mut file = train::load(&args.config)?;
    let scheme = match args.scheme {
        Some(name) => Some(SchemeSpec { name, bits: args.bits, k: args.k }),
        None => None,
    };
    let overrides = train::Overrides {
        scheme,
        repeats: args.repeats,
        seeds: args.seeds,
        iterations: args.iterations,
        workers: args.workers,
    };
    let manifest = train::manifest(&mut file, &args.config, &args.out.out_dir, overrides)?;
    let report = train::run(&file, &manifest, args.verbose)?;
    println!("wrote {} files to {}", report.files.len(), manifest.out_dir.display());
    if report.diverged > 0 {
        eprintln!("{} run(s) diverged", report.diverged);
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(args: VerifyArgs) -> Result<ExitCode> {
    let defaults = VerifyOptions::default();
    let opts = VerifyOptions {
        samples: args.samples,
        seed: args.seed,
        points: args.points.unwrap_or(defaults.points),
        commutativity_cases: args.commutativity_cases,
        commutativity_workers: args.workers,
        packing_trials: args.packing_trials,
        norm_source: args.norm_source,
        ..defaults
    };
    if opts.samples < 2 || opts.points.iter().any(|p| p.n == 0 || p.s == 0) {
        return Err(UsageError("need at least 2 samples and operating points with n, s >= 1".into()).into());
    }
    let suites = if args.suites.is_empty() { Suite::ALL.to_vec() } else { args.suites };
    let mut failed = Vec::new();
    for suite in suites {
        let report = verify::run(suite, &opts);
        print!("{report}");
        if !report.passed() {
            failed.push(suite.name());
        }
    }
    if failed.is_empty() {
        println!("all suites passed");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("failed suites: {}", failed.join(", "));
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    if args.n == 0 || args.workers == 0 || args.iterations == 0 {
        return Err(UsageError("n, workers and iterations must be >= 1".into()).into());
    }
    let scheme = args.scheme.descriptor(args.n).map_err(|e| UsageError(format!("{e:#}")))?;
    let opts = bench::BenchOptions { dim: args.n, workers: args.workers, iterations: args.iterations, seed: args.seed };
    let r = bench::run(&scheme, &opts)?;
    let dense_bits = 32 * args.n as u64;
    println!("scheme {} n={} workers={} iterations={}", scheme.label(), args.n, args.workers, args.iterations);
    println!("  compress + reduce   {:>10.2} ns/coordinate/worker", r.compress_reduce_ns);
    println!("  decode              {:>10.2} ns/coordinate", r.decode_ns);
    if let Some(p) = r.pack_roundtrip_ns {
        println!("  pack + unpack       {:>10.2} ns/communicated coordinate", p);
    }
    println!(
        "  payload             {:>10} bits charged, {} bits packed ({:.1}x smaller than 32-bit)",
        r.nominal_bits,
        r.lossless_bits,
        dense_bits as f64 / r.nominal_bits as f64
    );
    println!("  simulated time      {:>10.3e} s/iteration on the default link", r.sim_seconds);
    Ok(ExitCode::SUCCESS)
}

fn cmd_perf(args: PerfArgs) -> Result<ExitCode> {
    let profiles = if args.profiles.is_empty() {
        vec!["resnet50-like".to_string(), "vgg16-like".to_string()]
    } else {
        args.profiles
    };
    let profiles = profiles.iter().map(|p| perf::load_profile(p)).collect::<Result<Vec<_>>>()?;
    let cluster = match &args.cluster {
        Some(path) => perf::load_cluster(path)?,
        None => {
            let inter = LinkProfile::ethernet_gbps(args.gbps, 5e-5).map_err(|e| UsageError(e.to_string()))?;
            let c = ClusterSpec::ethernet(1, args.gpus_per_node, args.gbps).map_err(|e| UsageError(e.to_string()))?;
            ClusterSpec { inter, ..c }
        }
    };
    cluster.validate().map_err(|e| UsageError(e.to_string()))?;
    let workers = args.workers.unwrap_or_else(|| DEFAULT_WORKER_COUNTS.to_vec());
    let specs = if args.schemes.is_empty() {
        perf::DEFAULT_SCHEMES.iter().map(|s| s.parse().expect("valid default")).collect()
    } else {
        args.schemes
    };
    perf::run(&profiles, &cluster, &specs, &workers, &args.out.out_dir)?;
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // Help and version go to stdout with status 0; errors use 2.
            let _ = e.print();
            return ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2));
        }
    };
    if cli.explain_schemes {
        print!("{}", scheme::explain());
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: a subcommand is required (train, verify, bench-compress, perf-model); see --help");
        return ExitCode::from(2);
    };
    let result = match command {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::BenchCompress(a) => cmd_bench(a),
        Command::PerfModel(a) => cmd_perf(a),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
