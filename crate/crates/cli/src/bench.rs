//! `gradcomp bench-compress`: wall-clock cost of one compression round.

use std::time::Instant;

use anyhow::Result;
use gradcomp::bitpack::{PackedBuffer, SchemeTag};
use gradcomp::budget::bit_cost;
use gradcomp::collectives::{CostModel, WorkerGroup};
use gradcomp::trainer::{compress_and_reduce, NormSource, RoundContext};
use gradcomp::{lossless_level_width, QuantRng, SchemeDescriptor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub struct BenchOptions {
    pub dim: usize,
    pub workers: usize,
    pub iterations: u64,
    pub seed: u64,
}

/// Per-coordinate timings in nanoseconds, averaged over iterations.
#[derive(Debug, Clone, Copy)]
pub struct BenchResult {
    pub compress_reduce_ns: f64,
    pub decode_ns: f64,
    pub pack_roundtrip_ns: Option<f64>,
    pub nominal_bits: u64,
    pub lossless_bits: u64,
    pub sim_seconds: f64,
}

pub fn run(scheme: &SchemeDescriptor, opts: &BenchOptions) -> Result<BenchResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let grads: Vec<Vec<f64>> = (0..opts.workers)
        .map(|_| (0..opts.dim).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let budget = bit_cost(scheme, opts.dim)?;
    let mut group = WorkerGroup::new(opts.workers, CostModel::default())?;
    let coded = scheme.communicated_coordinates(opts.dim);
    // Levels spread over the full range, standing in for one worker's payload.
    let bound = scheme.quantizer().map_or(0, |q| i64::from(q.level_bound()));
    let levels: Vec<i32> = (0..coded as i64).map(|i| ((i * 7919) % (2 * bound + 1) - bound) as i32).collect();
    let (mut t_reduce, mut t_decode, mut t_pack) = (0.0, 0.0, 0.0);
    for it in 0..opts.iterations {
        let ctx = RoundContext {
            quant_rng: QuantRng::new(opts.seed),
            shared_seed: opts.seed,
            iteration: it,
            norm_source: NormSource::Subvector,
        };
        let start = Instant::now();
        let reduced = compress_and_reduce(&mut group, scheme, &grads, &ctx)?;
        t_reduce += start.elapsed().as_secs_f64();
        let start = Instant::now();
        let g = reduced.decode()?;
        t_decode += start.elapsed().as_secs_f64();
        std::hint::black_box(g);
        if let Some(q) = scheme.quantizer() {
            // Pack one worker's worth of levels at the lossless width.
            let width = lossless_level_width(q.level_bound());
            let start = Instant::now();
            let buf = PackedBuffer::single_scale(&levels, width, 1.0, SchemeTag::SingleScale)?;
            let back = buf.levels()?;
            t_pack += start.elapsed().as_secs_f64();
            std::hint::black_box(back);
        }
    }
    let per = |t: f64| t * 1e9 / (opts.iterations as f64 * (opts.dim * opts.workers) as f64);
    let sim_seconds = group.ledger().total_sim_seconds() / opts.iterations as f64;
    Ok(BenchResult {
        compress_reduce_ns: per(t_reduce),
        decode_ns: t_decode * 1e9 / (opts.iterations as f64 * opts.dim as f64),
        pack_roundtrip_ns: scheme.quantizer().map(|_| t_pack * 1e9 / (opts.iterations as f64 * coded.max(1) as f64)),
        nominal_bits: budget.total_bits,
        lossless_bits: budget.lossless_total_bits(),
        sim_seconds,
    })
}
