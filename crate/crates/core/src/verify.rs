//! Statistical and exactness suites behind `gradcomp verify`.
//!
//! Each suite returns a report of individual checks with the measured
//! value and the limit it was held to; suites never return errors, a
//! failed precondition is reported as a failed check.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF, DiscreteCDF, Normal, Poisson};

use crate::bitpack::{level_range, pack, unpack};
use crate::collectives::{CostModel, WorkerGroup};
use crate::error::{Error, Result};
use crate::norm::{l2_norm, pairwise_sum};
use crate::quantize::{multiscale_local_scales, qsgd_decode, qsgd_encode_into, PreparedEncoding};
use crate::rng::QuantRng;
use crate::sparsify::{gather, global_randk_indices};
use crate::trainer::NormSource;
use crate::types::{MaxNorm, ScaleIndexVector, ScaleSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Unbiasedness,
    Variance,
    Commutativity,
    Uniformity,
    Packing,
}

impl Suite {
    pub const ALL: [Suite; 5] =
        [Suite::Unbiasedness, Suite::Variance, Suite::Commutativity, Suite::Uniformity, Suite::Packing];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unbiasedness => "unbiasedness",
            Suite::Variance => "variance",
            Suite::Commutativity => "commutativity",
            Suite::Uniformity => "uniformity",
            Suite::Packing => "packing",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::config(format!("unknown suite {s:?}")))
    }
}

/// Per-coordinate deviation, in standard errors, counted as an exceedance.
pub const Z_THRESHOLD: f64 = 4.0;

/// The unbiasedness suite fails when an unbiased quantizer would produce
/// that many exceedances with probability below this level.
pub const EXCEEDANCE_LEVEL: f64 = 1e-3;

/// A dimension and scale at which the quantizer is exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OperatingPoint {
    pub n: usize,
    pub s: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOptions {
    /// Monte-Carlo draws per operating point, and iterations for uniformity.
    pub samples: u64,
    pub seed: u64,
    pub points: Vec<OperatingPoint>,
    pub commutativity_cases: u64,
    pub commutativity_workers: usize,
    pub packing_trials: u64,
    /// Relative slack on the variance bound.
    pub variance_slack: f64,
    /// Normalizer used by the sparsified variance check.
    pub norm_source: NormSource,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            samples: 10_000,
            seed: 0,
            points: vec![
                OperatingPoint { n: 10, s: 2 },
                OperatingPoint { n: 1000, s: 16 },
                OperatingPoint { n: 10_000, s: 256 },
            ],
            commutativity_cases: 1000,
            commutativity_workers: 8,
            packing_trials: 1_000_000,
            variance_slack: 0.05,
            norm_source: NormSource::Subvector,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub label: String,
    pub passed: bool,
    pub measured: f64,
    pub limit: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "[{}] {} {}: measured {:.6e}, limit {:.6e}{}{}",
                if c.passed { "PASS" } else { "FAIL" },
                self.suite,
                c.label,
                c.measured,
                c.limit,
                if c.note.is_empty() { "" } else { "; " },
                c.note
            )?;
        }
        Ok(())
    }
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> SuiteReport {
    let checks = match suite {
        Suite::Unbiasedness => opts.points.iter().map(|&p| guard(unbiasedness_check(p, opts), p)).collect(),
        Suite::Variance => opts
            .points
            .iter()
            .flat_map(|&p| {
                [
                    guard(variance_check(p, opts, false), p),
                    guard(variance_check(p, opts, true), p),
                    guard(sparsified_variance_check(p, opts), p),
                ]
            })
            .collect(),
        Suite::Commutativity => vec![commutativity_check(opts)],
        Suite::Uniformity => vec![uniformity_check(opts)],
        Suite::Packing => packing_checks(opts),
    };
    SuiteReport { suite, checks }
}

fn guard(r: Result<Check>, p: OperatingPoint) -> Check {
    r.unwrap_or_else(|e| Check {
        label: format!("n={} s={}", p.n, p.s),
        passed: false,
        measured: f64::NAN,
        limit: f64::NAN,
        note: e.to_string(),
    })
}

fn gaussian_vector(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Per-coordinate sums of levels and squared levels over repeated draws.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelMoments {
    pub draws: u64,
    pub sum: Vec<i64>,
    pub sum_sq: Vec<i64>,
    /// Decode factor `‖w‖₂ / s_i` per coordinate.
    pub factor: Vec<f64>,
}

/// How far the per-coordinate Monte-Carlo means sit from their targets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deviation {
    /// Largest `|mean_i − v_i| / se_i`.
    pub worst: f64,
    /// Coordinates above the threshold.
    pub over: usize,
    /// Coordinates an exactly unbiased quantizer puts above the threshold
    /// on average, `Σ P(|Z| > threshold)` over coordinates with `se_i > 0`.
    pub expected_over: f64,
}

impl Deviation {
    /// Probability that an unbiased quantizer has at least `over`
    /// exceedances, treating exceedances as Poisson.
    pub fn tail_probability(&self) -> f64 {
        if self.over == 0 {
            return 1.0;
        }
        if self.expected_over == 0.0 {
            return 0.0;
        }
        Poisson::new(self.expected_over).map_or(0.0, |d| d.sf(self.over as u64 - 1))
    }
}

impl LevelMoments {
    fn from_counts(prepared: &PreparedEncoding, counts: &[u32], draws: u64, factor: Vec<f64>) -> Self {
        let d = draws as i64;
        let (sum, sum_sq) = counts
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let (lo, hi) = (i64::from(prepared.lower_level(i)), i64::from(prepared.lower_level(i) + prepared.step(i)));
                let c = i64::from(c);
                (lo * (d - c) + hi * c, lo * lo * (d - c) + hi * hi * c)
            })
            .unzip();
        Self { draws, sum, sum_sq, factor }
    }

    /// Standardized deviation of each coordinate's mean decode from `v`.
    ///
    /// The standard error is the exact one, `factor·sqrt(p(1−p)/D)` with
    /// `p` the rounding probability of `v_i`. Coordinates with `p = 0` must
    /// match up to rounding of the decode.
    pub fn deviation(&self, v: &[f64], threshold: f64) -> Deviation {
        let d = self.draws as f64;
        let normal = Normal::standard();
        let tail = 2.0 * normal.sf(threshold);
        let mut out = Deviation { worst: 0.0, over: 0, expected_over: 0.0 };
        for (i, &x) in v.iter().enumerate() {
            let f = self.factor[i];
            let ratio = x.abs() / f;
            let p = ratio - ratio.floor();
            let dev = (f * (self.sum[i] as f64 / d) - x).abs();
            let z = if p > 0.0 {
                out.expected_over += tail;
                dev / (f * (p * (1.0 - p) / d).sqrt())
            } else if dev <= 4.0 * f64::EPSILON * x.abs().max(f) {
                0.0
            } else {
                f64::INFINITY
            };
            out.worst = out.worst.max(z);
            out.over += usize::from(z > threshold);
        }
        out
    }

    /// Empirical `E‖Q(v) − v‖²`, evaluated exactly from the integer moments.
    pub fn mean_squared_error(&self, v: &[f64]) -> f64 {
        let d = self.draws as f64;
        let terms: Vec<f64> = (0..v.len())
            .map(|i| {
                let c = self.factor[i];
                c * c * self.sum_sq[i] as f64 / d - 2.0 * c * v[i] * self.sum[i] as f64 / d + v[i] * v[i]
            })
            .collect();
        pairwise_sum(&terms)
    }
}

fn count_round_ups(prepared: &PreparedEncoding, draws: u64, rng: QuantRng) -> Result<Vec<u32>> {
    if draws > u64::from(u32::MAX) {
        return Err(Error::config(format!("at most {} draws per point", u32::MAX)));
    }
    let mut counts = vec![0u32; prepared.len()];
    for d in 0..draws {
        prepared.count_round_ups(&rng.stream(0, d), &mut counts);
    }
    Ok(counts)
}

/// Draw `draws` single-scale encodings of `v` against `wnorm`.
pub fn single_scale_moments(v: &[f64], wnorm: MaxNorm, s: u32, draws: u64, rng: QuantRng) -> Result<LevelMoments> {
    let prepared = PreparedEncoding::single_scale(v, wnorm, s)?;
    let counts = count_round_ups(&prepared, draws, rng)?;
    Ok(LevelMoments::from_counts(&prepared, &counts, draws, vec![wnorm.value() / f64::from(s); v.len()]))
}

/// Draw `draws` multi-scale encodings of `v` with its own scale choice.
pub fn multi_scale_moments(
    v: &[f64],
    wnorm: MaxNorm,
    scales: &ScaleSet,
    draws: u64,
    rng: QuantRng,
) -> Result<(LevelMoments, ScaleIndexVector)> {
    let shared = multiscale_local_scales(v, wnorm, scales)?;
    let prepared = PreparedEncoding::multi_scale(v, wnorm, &shared, scales)?;
    let counts = count_round_ups(&prepared, draws, rng)?;
    let factor = shared.indices().iter().map(|&j| wnorm.value() / f64::from(scales.get(j))).collect();
    Ok((LevelMoments::from_counts(&prepared, &counts, draws, factor), shared))
}

/// `(1 + min(n/s², √n/s))·‖w‖²`.
pub fn variance_bound(n: usize, s: u32, wnorm: f64) -> f64 {
    let (n, s) = (n as f64, f64::from(s));
    (1.0 + (n / (s * s)).min(n.sqrt() / s)) * wnorm * wnorm
}

/// A test vector and a normalizer `‖w‖₂ ≥ ‖v‖₂`, as if a second worker
/// held a gradient 1.5 times larger.
fn test_input(p: OperatingPoint, seed: u64) -> Result<(Vec<f64>, MaxNorm)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (p.n as u64) << 20 ^ u64::from(p.s));
    let v = gaussian_vector(p.n, &mut rng);
    let w = MaxNorm::new(1.5 * l2_norm(&v)?)?;
    Ok((v, w))
}

fn unbiasedness_check(p: OperatingPoint, opts: &VerifyOptions) -> Result<Check> {
    let (v, w) = test_input(p, opts.seed)?;
    let m = single_scale_moments(&v, w, p.s, opts.samples, QuantRng::new(opts.seed))?;
    let dev = m.deviation(&v, Z_THRESHOLD);
    let tail = dev.tail_probability();
    Ok(Check {
        label: format!("n={} s={}", p.n, p.s),
        passed: tail >= EXCEEDANCE_LEVEL,
        measured: dev.over as f64,
        limit: dev.expected_over,
        note: format!(
            "coordinates beyond {Z_THRESHOLD} SE over {} draws vs expected if unbiased; \
             P(at least this many) = {tail:.3}; max z {:.2}",
            opts.samples, dev.worst
        ),
    })
}

fn variance_check(p: OperatingPoint, opts: &VerifyOptions, multi: bool) -> Result<Check> {
    let (v, w) = test_input(p, opts.seed)?;
    let rng = QuantRng::new(opts.seed ^ 0x7a11);
    let (mse, label) = if multi {
        let scales = ScaleSet::new(vec![p.s, 4 * p.s, 16 * p.s])?;
        let (m, _) = multi_scale_moments(&v, w, &scales, opts.samples, rng)?;
        (m.mean_squared_error(&v), format!("n={} scales={:?}", p.n, scales.scales()))
    } else {
        let m = single_scale_moments(&v, w, p.s, opts.samples, rng)?;
        (m.mean_squared_error(&v), format!("n={} s={}", p.n, p.s))
    };
    let bound = variance_bound(p.n, p.s, w.value());
    let limit = bound * (1.0 + opts.variance_slack);
    Ok(Check { label, passed: mse <= limit, measured: mse, limit, note: format!("ratio {:.4}", mse / bound) })
}

/// Random-K subvector quantized against the configured normalizer: the
/// subvector's own norm, or the full vector's.
fn sparsified_variance_check(p: OperatingPoint, opts: &VerifyOptions) -> Result<Check> {
    let (v, _) = test_input(p, opts.seed)?;
    let k = (p.n / 10).max(1);
    let idx = global_randk_indices(opts.seed, 0, p.n, k)?;
    let sub = gather(&v, &idx)?;
    let base = match opts.norm_source {
        NormSource::Subvector => l2_norm(&sub)?,
        NormSource::FullGradient => l2_norm(&v)?,
    };
    let w = MaxNorm::new(1.5 * base)?;
    let m = single_scale_moments(&sub, w, p.s, opts.samples, QuantRng::new(opts.seed ^ 0x5b))?;
    let mse = m.mean_squared_error(&sub);
    let bound = variance_bound(k, p.s, w.value());
    let limit = bound * (1.0 + opts.variance_slack);
    let source = match opts.norm_source {
        NormSource::Subvector => "subvector",
        NormSource::FullGradient => "full-gradient",
    };
    Ok(Check {
        label: format!("grandk n={} K={k} s={} norm={source}", p.n, p.s),
        passed: mse <= limit,
        measured: mse,
        limit,
        note: format!("ratio {:.4}", mse / bound),
    })
}

fn commutativity_check(opts: &VerifyOptions) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0ffee);
    let mut failures = 0u64;
    let mut worst = 0.0f64;
    let m = opts.commutativity_workers.max(1);
    let mut first_error = None;
    for case in 0..opts.commutativity_cases {
        match commutativity_case(&mut rng, m, case, opts.seed) {
            Ok(rel) => {
                worst = worst.max(rel);
                failures += u64::from(rel > 1.0);
            }
            Err(e) => {
                failures += 1;
                first_error.get_or_insert(e.to_string());
            }
        }
    }
    Check {
        label: format!("M={m} cases={}", opts.commutativity_cases),
        passed: failures == 0,
        measured: failures as f64,
        limit: 0.0,
        note: format!(
            "level sums exact; worst float gap {worst:.3} of tolerance{}",
            first_error.map(|e| format!("; {e}")).unwrap_or_default()
        ),
    }
}

/// One random case; returns the float gap as a fraction of its tolerance,
/// or an error if the integer sums disagree.
pub fn commutativity_case(rng: &mut ChaCha8Rng, workers: usize, case: u64, seed: u64) -> Result<f64> {
    let n = rng.random_range(1..=64);
    let s = rng.random_range(1..=64u32);
    let vs: Vec<Vec<f64>> = (0..workers)
        .map(|_| {
            let scale = rng.random_range(0.01..10.0);
            gaussian_vector(n, rng).into_iter().map(|x| x * scale).collect()
        })
        .collect();
    let norms: Vec<f64> = vs.iter().map(|v| l2_norm(v)).collect::<Result<_>>()?;
    let mut group = WorkerGroup::new(workers, CostModel::default())?;
    let w = MaxNorm::new(group.allreduce_max(&norms)?)?;
    let qrng = QuantRng::new(seed ^ case);
    let mut levels = vec![vec![0i32; n]; workers];
    for (m, (v, out)) in vs.iter().zip(levels.iter_mut()).enumerate() {
        qsgd_encode_into(v, w, s, &qrng.stream(m as u64, case), out)?;
    }
    let reduced = group.allreduce_sum_levels(&levels, 32)?;
    let manual: Vec<i64> = (0..n).map(|i| levels.iter().map(|l| i64::from(l[i])).sum()).collect();
    if reduced != manual {
        return Err(Error::contract(format!("case {case}: level sums differ")));
    }
    let mf = workers as f64;
    let z: Vec<f64> = reduced.iter().map(|&x| x as f64).collect();
    let lhs: Vec<f64> = qsgd_decode(&z, w, s)?.iter().map(|x| x / mf).collect();
    let mut rhs = vec![0.0; n];
    for l in &levels {
        let zl: Vec<f64> = l.iter().map(|&x| f64::from(x)).collect();
        for (r, d) in rhs.iter_mut().zip(qsgd_decode(&zl, w, s)?.iter()) {
            *r += d;
        }
    }
    // Each side rounds at most M + 2 times on values bounded by ‖w‖.
    let tol = 4.0 * (mf + 2.0) * f64::EPSILON * w.value();
    Ok(lhs
        .iter()
        .zip(&rhs)
        .map(|(a, b)| (a - b / mf).abs() / tol)
        .fold(0.0, f64::max))
}

/// Pearson statistic for selection counts, corrected for sampling K of n
/// without replacement (each count has variance `T·p·(1−p)·n/(n−1)`).
pub fn selection_chi_square(counts: &[u64], iterations: u64, k: usize) -> (f64, f64) {
    let n = counts.len() as f64;
    let p = k as f64 / n;
    let expected = iterations as f64 * p;
    let var = iterations as f64 * p * (1.0 - p) * n / (n - 1.0);
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / var).sum::<f64>();
    // Σ counts is fixed, so one degree of freedom is lost.
    let df = n - 1.0;
    let p_value = ChiSquared::new(df).map(|d| d.sf(stat)).unwrap_or(f64::NAN);
    (stat, p_value)
}

fn uniformity_check(opts: &VerifyOptions) -> Check {
    let (n, k) = (100usize, 10usize);
    let mut counts = vec![0u64; n];
    let mut disagreements = 0u64;
    for t in 0..opts.samples {
        let Ok(a) = global_randk_indices(opts.seed, t, n, k) else {
            disagreements += 1;
            continue;
        };
        // A second worker derives the set independently from the shared seed.
        if global_randk_indices(opts.seed, t, n, k).ok().as_ref() != Some(&a) {
            disagreements += 1;
        }
        for &i in a.indices() {
            counts[i] += 1;
        }
    }
    let (stat, p) = selection_chi_square(&counts, opts.samples, k);
    Check {
        label: format!("n={n} K={k} iterations={}", opts.samples),
        passed: p > 0.01 && disagreements == 0,
        measured: p,
        limit: 0.01,
        note: format!("chi-square {stat:.2} on {} df; {disagreements} cross-worker disagreements", n - 1),
    }
}

fn packing_checks(opts: &VerifyOptions) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xbacc);
    let mut mismatches = 0u64;
    for _ in 0..opts.packing_trials {
        let r = rng.random_range(1..=16u32);
        let (lo, hi) = level_range(r);
        let len = rng.random_range(0..=48);
        let levels: Vec<i32> = (0..len).map(|_| rng.random_range(lo..=hi) as i32).collect();
        let ok = pack(&levels, r).and_then(|b| unpack(&b)).map(|u| u == levels).unwrap_or(false);
        mismatches += u64::from(!ok);
    }
    let mut exhaustive = 0u64;
    let mut exhaustive_bad = 0u64;
    for r in 1..=4u32 {
        let (lo, hi) = level_range(r);
        for a in lo..=hi {
            for b in lo..=hi {
                for c in lo..=hi {
                    let levels = [a as i32, b as i32, c as i32];
                    let ok = pack(&levels, r).and_then(|x| unpack(&x)).map(|u| u == levels).unwrap_or(false);
                    exhaustive += 1;
                    exhaustive_bad += u64::from(!ok);
                }
            }
        }
    }
    vec![
        Check {
            label: format!("random round trips r in [1,16], trials={}", opts.packing_trials),
            passed: mismatches == 0,
            measured: mismatches as f64,
            limit: 0.0,
            note: String::new(),
        },
        Check {
            label: "exhaustive triples r <= 4".into(),
            passed: exhaustive_bad == 0,
            measured: exhaustive_bad as f64,
            limit: 0.0,
            note: format!("{exhaustive} triples"),
        },
    ]
}
