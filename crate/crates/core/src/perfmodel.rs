//! Analytical throughput model for data-parallel training on a two-level
//! cluster.
//!
//! One iteration costs `compute + encode + communicate + decode`, with no
//! overlap between communication and backpropagation. Each all-reduce is
//! hierarchical: a ring all-reduce inside every node over the intra-node
//! link, then a ring all-reduce among one leader per node over the
//! inter-node link. A compressed iteration issues the same collectives as
//! the trainer: a scalar max for the norm, the scale-index min for
//! multi-scale schemes, and the level sum.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::budget::{index_width, nominal_level_width, FLOAT_BITS, HEADER_BITS};
use crate::collectives::{ring_allreduce_cost, LinkProfile};
use crate::error::{Error, Result};
use crate::types::{Quantizer, SchemeDescriptor};

/// Profiled cost of one model on one accelerator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    pub n_params: u64,
    /// Forward plus backward time for one per-worker batch.
    pub compute_sec_per_batch: f64,
    pub encode_sec_per_coord: f64,
    pub decode_sec_per_coord: f64,
    pub batch_size: u64,
}

impl ModelProfile {
    /// Compute-heavy placeholder sized like ResNet50 (23,520,842 parameters).
    pub fn resnet50_like() -> Self {
        Self {
            name: "resnet50-like".into(),
            n_params: 23_520_842,
            compute_sec_per_batch: 0.2,
            encode_sec_per_coord: 1e-10,
            decode_sec_per_coord: 5e-11,
            batch_size: 128,
        }
    }

    /// Communication-heavy placeholder sized like VGG16 (14,728,266 parameters).
    pub fn vgg16_like() -> Self {
        Self {
            name: "vgg16-like".into(),
            n_params: 14_728_266,
            compute_sec_per_batch: 0.04,
            encode_sec_per_coord: 1e-10,
            decode_sec_per_coord: 5e-11,
            batch_size: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if self.n_params == 0 || self.batch_size == 0 {
            return Err(Error::config(format!("profile {}: n_params and batch_size must be >= 1", self.name)));
        }
        if !(self.compute_sec_per_batch > 0.0 && self.compute_sec_per_batch.is_finite()) {
            return Err(Error::config(format!("profile {}: compute time must be positive", self.name)));
        }
        if !nonneg(self.encode_sec_per_coord) || !nonneg(self.decode_sec_per_coord) {
            return Err(Error::config(format!("profile {}: encode/decode cost must be >= 0", self.name)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub gpus_per_node: usize,
    pub intra: LinkProfile,
    pub inter: LinkProfile,
}

impl ClusterSpec {
    /// NVLink-class intra-node link and Ethernet of `gbps` between nodes.
    pub fn ethernet(nodes: usize, gpus_per_node: usize, gbps: f64) -> Result<Self> {
        Ok(Self {
            nodes,
            gpus_per_node,
            intra: LinkProfile::new(1e10, 5e-6)?,
            inter: LinkProfile::ethernet_gbps(gbps, 5e-5)?,
        })
    }

    pub fn workers(&self) -> usize {
        self.nodes * self.gpus_per_node
    }

    pub fn with_workers(&self, workers: usize) -> Result<Self> {
        if workers == 0 || (workers > self.gpus_per_node && !workers.is_multiple_of(self.gpus_per_node)) {
            return Err(Error::config(format!(
                "{workers} workers do not fill nodes of {} GPUs",
                self.gpus_per_node
            )));
        }
        let (nodes, per) = if workers <= self.gpus_per_node { (1, workers) } else { (workers / self.gpus_per_node, self.gpus_per_node) };
        Ok(Self { nodes, gpus_per_node: per, ..*self })
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 || self.gpus_per_node == 0 {
            return Err(Error::config("cluster needs at least one node and one GPU per node"));
        }
        self.intra.validate()?;
        self.inter.validate()
    }

    /// Hierarchical all-reduce of `payload_bits` per worker.
    pub fn allreduce_seconds(&self, payload_bits: u64) -> f64 {
        let intra = ring_allreduce_cost(self.gpus_per_node, payload_bits);
        let inter = ring_allreduce_cost(self.nodes, payload_bits);
        self.intra.seconds(intra, self.gpus_per_node) + self.inter.seconds(inter, self.nodes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeBreakdown {
    pub compute: f64,
    pub encode: f64,
    pub communicate: f64,
    pub decode: f64,
}

impl TimeBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.encode + self.communicate + self.decode
    }
}

/// Per-worker payloads, in bits, of each collective `scheme` issues.
pub fn collective_payloads(scheme: &SchemeDescriptor, n: u64) -> Result<Vec<u64>> {
    let quantized = |q: &Quantizer, coords: u64| match q {
        Quantizer::SingleScale { s } => vec![HEADER_BITS, coords * u64::from(nominal_level_width(*s))],
        Quantizer::MultiScale { scales } => vec![
            HEADER_BITS,
            coords * u64::from(index_width(scales.len())),
            coords * u64::from(nominal_level_width(scales.min_scale())),
        ],
    };
    let n_usize = usize::try_from(n).map_err(|_| Error::config("dimension too large"))?;
    scheme.validate(n_usize)?;
    Ok(match scheme {
        SchemeDescriptor::Uncompressed => vec![n * u64::from(FLOAT_BITS)],
        SchemeDescriptor::QsgdMaxNorm { s } => quantized(&Quantizer::SingleScale { s: *s }, n),
        SchemeDescriptor::QsgdMaxNormMultiScale { scales } => {
            quantized(&Quantizer::MultiScale { scales: scales.clone() }, n)
        }
        SchemeDescriptor::GlobalRandK { k, inner } => quantized(inner, *k as u64),
    })
}

pub fn iteration_time(profile: &ModelProfile, cluster: &ClusterSpec, scheme: &SchemeDescriptor) -> Result<TimeBreakdown> {
    profile.validate()?;
    cluster.validate()?;
    let payloads = collective_payloads(scheme, profile.n_params)?;
    let coded = match scheme {
        SchemeDescriptor::Uncompressed => 0.0,
        other => other.communicated_coordinates(profile.n_params as usize) as f64,
    };
    Ok(TimeBreakdown {
        compute: profile.compute_sec_per_batch,
        encode: coded * profile.encode_sec_per_coord,
        communicate: payloads.iter().map(|&p| cluster.allreduce_seconds(p)).sum(),
        decode: coded * profile.decode_sec_per_coord,
    })
}

/// Samples per second over the whole cluster.
pub fn predict_throughput(profile: &ModelProfile, cluster: &ClusterSpec, scheme: &SchemeDescriptor) -> Result<f64> {
    let t = iteration_time(profile, cluster, scheme)?;
    Ok((cluster.workers() as u64 * profile.batch_size) as f64 / t.total())
}

/// Throughput relative to uncompressed training on the same cluster.
pub fn speedup(profile: &ModelProfile, cluster: &ClusterSpec, scheme: &SchemeDescriptor) -> Result<f64> {
    Ok(predict_throughput(profile, cluster, scheme)?
        / predict_throughput(profile, cluster, &SchemeDescriptor::Uncompressed)?)
}

/// Inter-node bandwidth (bytes/s) at which `scheme` and uncompressed
/// training have equal throughput. Below it the scheme is faster. `None`
/// when one of them wins at every bandwidth.
pub fn breakeven_inter_bandwidth(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    scheme: &SchemeDescriptor,
) -> Result<Option<f64>> {
    // Iteration time is affine in 1/bandwidth: t = a + b/bw.
    let affine = |s: &SchemeDescriptor| -> Result<(f64, f64)> {
        let at = |bw: f64| -> Result<f64> {
            let mut c = *cluster;
            c.inter.bandwidth_bytes_per_sec = bw;
            Ok(iteration_time(profile, &c, s)?.total())
        };
        let bw = cluster.inter.bandwidth_bytes_per_sec;
        let (t1, t2) = (at(bw)?, at(2.0 * bw)?);
        let slope = (t1 - t2) * 2.0 * bw;
        Ok((t1 - slope / bw, slope))
    };
    let (au, bu) = affine(&SchemeDescriptor::Uncompressed)?;
    let (ac, bc) = affine(scheme)?;
    if bu <= bc {
        return Ok(None);
    }
    let x = (ac - au) / (bu - bc);
    Ok((x > 0.0).then(|| 1.0 / x))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputPoint {
    pub workers: usize,
    pub scheme: String,
    pub throughput: f64,
}

/// Worker counts used for scaling sweeps.
pub const DEFAULT_WORKER_COUNTS: [usize; 6] = [4, 8, 16, 32, 64, 128];

/// Throughput of every scheme at every worker count.
pub fn sweep(
    profile: &ModelProfile,
    cluster: &ClusterSpec,
    schemes: &[SchemeDescriptor],
    worker_counts: &[usize],
) -> Result<Vec<ThroughputPoint>> {
    let mut out = Vec::with_capacity(schemes.len() * worker_counts.len());
    for &w in worker_counts {
        let c = cluster.with_workers(w)?;
        for s in schemes {
            out.push(ThroughputPoint { workers: w, scheme: s.label(), throughput: predict_throughput(profile, &c, s)? });
        }
    }
    Ok(out)
}

/// `workers,scheme,throughput`.
pub fn write_csv<W: Write>(points: &[ThroughputPoint], mut out: W) -> Result<()> {
    writeln!(out, "workers,scheme,throughput")?;
    for p in points {
        writeln!(out, "{},{},{}", p.workers, p.scheme, p.throughput)?;
    }
    Ok(())
}
