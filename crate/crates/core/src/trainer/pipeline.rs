//! One compression-aggregation round over a [`WorkerGroup`].

use crate::budget::{index_width, nominal_level_width};
use crate::collectives::{Phase, WorkerGroup};
use crate::error::{Error, Result};
use crate::norm::l2_norm;
use crate::quantize::{
    multiscale_decode, multiscale_encode_into, multiscale_local_scales, qsgd_decode, qsgd_encode_into,
};
use crate::rng::QuantRng;
use crate::sparsify::{gather, global_randk_indices, scatter, IndexSet};
use crate::types::{MaxNorm, Quantizer, ScaleIndexVector, ScaleSet, SchemeDescriptor};

use super::config::NormSource;

/// Randomness and options shared by all workers for one round.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext {
    pub quant_rng: QuantRng,
    /// Seed every worker uses to draw the same random-K coordinates.
    pub shared_seed: u64,
    pub iteration: u64,
    pub norm_source: NormSource,
}

/// What every worker holds after the all-reduce, before decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum Aggregate {
    Dense { sum: Vec<f64> },
    SingleScale { wnorm: MaxNorm, level_sums: Vec<i64>, s: u32 },
    MultiScale { wnorm: MaxNorm, level_sums: Vec<i64>, shared: ScaleIndexVector, scales: ScaleSet },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reduced {
    pub aggregate: Aggregate,
    /// Coordinates that were communicated, for sparsified schemes.
    pub indices: Option<IndexSet>,
    pub workers: usize,
    pub dim: usize,
}

impl Reduced {
    /// The averaged gradient estimate: decode the level sums, then divide by M.
    pub fn decode(&self) -> Result<Vec<f64>> {
        let m = self.workers as f64;
        let sub = match &self.aggregate {
            Aggregate::Dense { sum } => sum.iter().map(|x| x / m).collect(),
            Aggregate::SingleScale { wnorm, level_sums, s } => {
                let z: Vec<f64> = level_sums.iter().map(|&x| x as f64).collect();
                let mut g = qsgd_decode(&z, *wnorm, *s)?.into_inner();
                g.iter_mut().for_each(|x| *x /= m);
                g
            }
            Aggregate::MultiScale { wnorm, level_sums, shared, scales } => {
                let z: Vec<f64> = level_sums.iter().map(|&x| x as f64).collect();
                let mut g = multiscale_decode(&z, *wnorm, shared, scales)?.into_inner();
                g.iter_mut().for_each(|x| *x /= m);
                g
            }
        };
        match &self.indices {
            Some(idx) => Ok(scatter(&sub, idx, self.dim)?.into_inner()),
            None => Ok(sub),
        }
    }
}

/// Compress every worker's gradient with `scheme`, reduce through `group`
/// and return the shared aggregate. Collectives are issued in the order
/// norm max, scale sharing (multi-scale only), level sum.
pub fn compress_and_reduce<G: AsRef<[f64]>>(
    group: &mut WorkerGroup,
    scheme: &SchemeDescriptor,
    grads: &[G],
    ctx: &RoundContext,
) -> Result<Reduced> {
    let workers = group.workers();
    if grads.len() != workers {
        return Err(Error::Protocol(format!("{} gradients for {workers} workers", grads.len())));
    }
    let dim = grads[0].as_ref().len();
    if let Some(m) = grads.iter().position(|g| g.as_ref().len() != dim) {
        return Err(Error::contract(format!("worker {m} gradient has the wrong length")));
    }
    scheme.validate(dim)?;
    group.set_iteration(ctx.iteration);
    let (aggregate, indices) = match scheme {
        SchemeDescriptor::Uncompressed => (Aggregate::Dense { sum: group.allreduce_sum(grads)? }, None),
        SchemeDescriptor::QsgdMaxNorm { s } => {
            let q = Quantizer::SingleScale { s: *s };
            let norms = local_norms(grads)?;
            (quantized_round(group, &q, grads, &norms, ctx)?, None)
        }
        SchemeDescriptor::QsgdMaxNormMultiScale { scales } => {
            let q = Quantizer::MultiScale { scales: scales.clone() };
            let norms = local_norms(grads)?;
            (quantized_round(group, &q, grads, &norms, ctx)?, None)
        }
        SchemeDescriptor::GlobalRandK { k, inner } => {
            let idx = global_randk_indices(ctx.shared_seed, ctx.iteration, dim, *k)?;
            let subs = grads
                .iter()
                .map(|g| gather(g.as_ref(), &idx).map(|v| v.into_inner()))
                .collect::<Result<Vec<_>>>()?;
            let norms = match ctx.norm_source {
                NormSource::Subvector => local_norms(&subs)?,
                NormSource::FullGradient => local_norms(grads)?,
            };
            (quantized_round(group, inner, &subs, &norms, ctx)?, Some(idx))
        }
    };
    Ok(Reduced { aggregate, indices, workers, dim })
}

fn local_norms<G: AsRef<[f64]>>(vs: &[G]) -> Result<Vec<f64>> {
    vs.iter().map(|v| l2_norm(v.as_ref())).collect()
}

fn quantized_round<G: AsRef<[f64]>>(
    group: &mut WorkerGroup,
    quantizer: &Quantizer,
    vs: &[G],
    norms: &[f64],
    ctx: &RoundContext,
) -> Result<Aggregate> {
    let n = vs[0].as_ref().len();
    let wnorm = MaxNorm::new(group.allreduce_max(norms)?)?;
    let streams: Vec<_> = (0..vs.len()).map(|m| ctx.quant_rng.stream(m as u64, ctx.iteration)).collect();
    let mut levels = vec![vec![0i32; n]; vs.len()];
    match quantizer {
        Quantizer::SingleScale { s } => {
            group.record_local(Phase::Encode, n);
            for ((v, out), rng) in vs.iter().zip(levels.iter_mut()).zip(&streams) {
                qsgd_encode_into(v.as_ref(), wnorm, *s, rng, out)?;
            }
            let level_sums = group.allreduce_sum_levels(&levels, nominal_level_width(*s))?;
            group.record_local(Phase::Decode, n);
            Ok(Aggregate::SingleScale { wnorm, level_sums, s: *s })
        }
        Quantizer::MultiScale { scales } => {
            group.record_local(Phase::Encode, n);
            let local: Vec<Vec<u32>> = vs
                .iter()
                .map(|v| multiscale_local_scales(v.as_ref(), wnorm, scales).map(|s| s.indices().to_vec()))
                .collect::<Result<_>>()?;
            let shared = group.allreduce_min_vec(&local, index_width(scales.len()))?;
            let shared = ScaleIndexVector::new(shared, scales)?;
            for ((v, out), rng) in vs.iter().zip(levels.iter_mut()).zip(&streams) {
                multiscale_encode_into(v.as_ref(), wnorm, &shared, scales, rng, out)?;
            }
            let level_sums = group.allreduce_sum_levels(&levels, nominal_level_width(scales.min_scale()))?;
            group.record_local(Phase::Decode, n);
            Ok(Aggregate::MultiScale { wnorm, level_sums, shared, scales: scales.clone() })
        }
    }
}
