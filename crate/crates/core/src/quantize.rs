//! Max-norm stochastic quantization, single- and multi-scale.
//!
//! Every worker normalizes by the same `‖w‖₂` (the largest worker gradient
//! norm), so level vectors from different workers live on the same grid
//! and can be summed by an all-reduce. A coordinate `v_i` maps to the
//! integer level `sign(v_i) · (l + B)` where `l = floor(s|v_i|/‖w‖₂)` and
//! `B ~ Bernoulli(s|v_i|/‖w‖₂ − l)`; decoding multiplies by `‖w‖₂ / s`.

use crate::error::{Error, Result};
use crate::rng::RoundingStream;
use crate::types::{GradientVector, LevelVector, MaxNorm, ScaleIndexVector, ScaleSet};

/// Stochastically round one coordinate to an integer level at scale `s`.
///
/// `ratio_scaled` is `(|x| / wnorm) * s`, computed by the caller so that
/// scale selection and encoding see the identical float. A ratio of exactly
/// one has no half-open bracket; it maps deterministically to level `s`.
#[inline(always)]
fn round_magnitude(ratio_scaled: f64, s: f64, u: f64) -> i32 {
    // ratio_scaled >= 0, so truncation is floor (and avoids a libm call).
    let mut lower = ratio_scaled as i32 as f64;
    let mut p = ratio_scaled - lower;
    if lower >= s {
        lower = s - 1.0;
        p = 1.0;
    }
    lower as i32 + i32::from(u < p)
}

#[inline(always)]
fn signed(x: f64, magnitude: i32) -> i32 {
    // Branch-free: signs of real gradients are unpredictable.
    let neg = (x.to_bits() >> 63) as i32;
    (magnitude ^ -neg) + neg
}

fn check_normalizer(v: &[f64], wnorm: f64) -> Result<()> {
    for (i, &x) in v.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value at coordinate {i}")));
        }
        if x.abs() > wnorm {
            return Err(Error::contract(format!(
                "|v[{i}]| = {} exceeds the max-norm {wnorm}",
                x.abs()
            )));
        }
    }
    Ok(())
}

/// Single-scale encode into a caller-provided buffer.
pub fn qsgd_encode_into(
    v: &[f64],
    wnorm: MaxNorm,
    s: u32,
    rng: &RoundingStream,
    out: &mut [i32],
) -> Result<()> {
    if s < 1 {
        return Err(Error::config("scale s must be >= 1"));
    }
    if out.len() != v.len() {
        return Err(Error::contract(format!(
            "output buffer has {} slots for {} coordinates",
            out.len(),
            v.len()
        )));
    }
    let w = wnorm.value();
    check_normalizer(v, w)?;
    if w == 0.0 {
        out.fill(0);
        return Ok(());
    }
    let sf = f64::from(s);
    for (i, (&x, slot)) in v.iter().zip(out.iter_mut()).enumerate() {
        // A zero coordinate has ratio 0 and p = 0, so it encodes to 0.
        *slot = signed(x, round_magnitude(x.abs() / w * sf, sf, rng.uniform(i as u64)));
    }
    Ok(())
}

/// Quantize `v` against the shared max-norm at scale `s`.
pub fn qsgd_encode(
    v: &GradientVector,
    wnorm: MaxNorm,
    s: u32,
    rng: &RoundingStream,
) -> Result<LevelVector> {
    let mut levels = vec![0; v.len()];
    qsgd_encode_into(v, wnorm, s, rng, &mut levels)?;
    Ok(LevelVector::from_parts(levels, s))
}

/// `‖w‖₂ · ζ / s`, elementwise.
pub fn qsgd_decode(zeta: &[f64], wnorm: MaxNorm, s: u32) -> Result<GradientVector> {
    if s < 1 {
        return Err(Error::config("scale s must be >= 1"));
    }
    let w = wnorm.value();
    let sf = f64::from(s);
    GradientVector::new(zeta.iter().map(|&z| w * z / sf).collect())
}

/// Per-coordinate choice of the largest scale `s` with
/// `s · |v_i| / ‖w‖₂ <= min(scales)`. Zero coordinates take the largest scale.
pub fn multiscale_local_scales(
    v: &[f64],
    wnorm: MaxNorm,
    scales: &ScaleSet,
) -> Result<ScaleIndexVector> {
    let w = wnorm.value();
    check_normalizer(v, w)?;
    let floor = f64::from(scales.min_scale());
    let top = scales.len() as u32 - 1;
    let indices = v
        .iter()
        .map(|&x| {
            if x == 0.0 {
                return top;
            }
            let ratio = x.abs() / w;
            // Same expression as the encoder uses, so a selected scale can
            // never produce a level above the minimum scale.
            (1..=top)
                .rev()
                .find(|&j| ratio * f64::from(scales.get(j)) <= floor)
                .unwrap_or(0)
        })
        .collect();
    Ok(ScaleIndexVector::from_raw(indices))
}

/// Elementwise minimum of every worker's scale choice. Scales are sorted,
/// so the minimum index is the minimum scale.
pub fn share_scales(local: &[ScaleIndexVector]) -> Result<ScaleIndexVector> {
    let (first, rest) = local
        .split_first()
        .ok_or_else(|| Error::contract("scale sharing needs at least one worker"))?;
    let mut shared = first.indices().to_vec();
    for (m, other) in rest.iter().enumerate() {
        if other.len() != shared.len() {
            return Err(Error::contract(format!(
                "worker {} supplied {} scale indices, expected {}",
                m + 1,
                other.len(),
                shared.len()
            )));
        }
        for (a, &b) in shared.iter_mut().zip(other.indices()) {
            *a = (*a).min(b);
        }
    }
    Ok(ScaleIndexVector::from_raw(shared))
}

/// Multi-scale encode into a caller-provided buffer.
pub fn multiscale_encode_into(
    v: &[f64],
    wnorm: MaxNorm,
    shared: &ScaleIndexVector,
    scales: &ScaleSet,
    rng: &RoundingStream,
    out: &mut [i32],
) -> Result<()> {
    if shared.len() != v.len() || out.len() != v.len() {
        return Err(Error::contract(format!(
            "length mismatch: {} coordinates, {} scale indices, {} output slots",
            v.len(),
            shared.len(),
            out.len()
        )));
    }
    let w = wnorm.value();
    check_normalizer(v, w)?;
    let floor = f64::from(scales.min_scale());
    for (i, ((&x, &idx), slot)) in v.iter().zip(shared.indices()).zip(out.iter_mut()).enumerate() {
        if idx as usize >= scales.len() {
            return Err(Error::contract(format!("scale index {idx} at coordinate {i} out of range")));
        }
        if x == 0.0 {
            *slot = 0;
            continue;
        }
        let sf = f64::from(scales.get(idx));
        let scaled = x.abs() / w * sf;
        if scaled > floor {
            return Err(Error::contract(format!(
                "coordinate {i} at scale {sf} exceeds the minimum-scale bound {floor}"
            )));
        }
        *slot = signed(x, round_magnitude(scaled, sf, rng.uniform(i as u64)));
    }
    Ok(())
}

/// Quantize `v` with the shared per-coordinate scales.
pub fn multiscale_encode(
    v: &GradientVector,
    wnorm: MaxNorm,
    shared: &ScaleIndexVector,
    scales: &ScaleSet,
    rng: &RoundingStream,
) -> Result<LevelVector> {
    let mut levels = vec![0; v.len()];
    multiscale_encode_into(v, wnorm, shared, scales, rng, &mut levels)?;
    Ok(LevelVector::from_parts(levels, scales.min_scale()))
}

/// `‖w‖₂ · ζ_i / s*_i`, elementwise.
pub fn multiscale_decode(
    zeta: &[f64],
    wnorm: MaxNorm,
    shared: &ScaleIndexVector,
    scales: &ScaleSet,
) -> Result<GradientVector> {
    if shared.len() != zeta.len() {
        return Err(Error::contract(format!(
            "{} levels but {} scale indices",
            zeta.len(),
            shared.len()
        )));
    }
    let w = wnorm.value();
    let mut out = Vec::with_capacity(zeta.len());
    for (&z, &idx) in zeta.iter().zip(shared.indices()) {
        if idx as usize >= scales.len() {
            return Err(Error::contract(format!("scale index {idx} out of range")));
        }
        out.push(w * z / f64::from(scales.get(idx)));
    }
    GradientVector::new(out)
}

/// Rounding thresholds for encoding one vector many times.
///
/// Coordinate `i` encodes to `sign · (lower_i + [bits53 < threshold_i])`
/// where `bits53` is the top 53 bits of the coordinate's random word. Since
/// the uniform draw is `bits53 · 2⁻⁵³`, comparing `u < p` is the same as
/// comparing `bits53 < ceil(p · 2⁵³)`, so the output is bitwise identical to
/// [`qsgd_encode_into`] / [`multiscale_encode_into`] on the same stream.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedEncoding {
    lower: Vec<i32>,
    negative: Vec<i32>,
    threshold: Vec<u64>,
}

impl PreparedEncoding {
    /// Single-scale thresholds for `v` against `wnorm`.
    pub fn single_scale(v: &[f64], wnorm: MaxNorm, s: u32) -> Result<Self> {
        if s < 1 {
            return Err(Error::config("scale s must be >= 1"));
        }
        let w = wnorm.value();
        check_normalizer(v, w)?;
        let sf = f64::from(s);
        Ok(Self::build(v, |x| if w == 0.0 { (0.0, sf) } else { (x.abs() / w * sf, sf) }))
    }

    /// Multi-scale thresholds for `v` with the shared scale choice.
    pub fn multi_scale(v: &[f64], wnorm: MaxNorm, shared: &ScaleIndexVector, scales: &ScaleSet) -> Result<Self> {
        // Runs every validation of the regular encoder.
        let mut probe = vec![0; v.len()];
        multiscale_encode_into(v, wnorm, shared, scales, &RoundingStream::ZERO, &mut probe)?;
        let w = wnorm.value();
        let mut idx = shared.indices().iter();
        Ok(Self::build(v, |x| {
            let sf = f64::from(scales.get(*idx.next().expect("lengths checked")));
            if x == 0.0 { (0.0, sf) } else { (x.abs() / w * sf, sf) }
        }))
    }

    fn build(v: &[f64], mut scaled: impl FnMut(f64) -> (f64, f64)) -> Self {
        let n = v.len();
        let mut out = Self { lower: Vec::with_capacity(n), negative: Vec::with_capacity(n), threshold: Vec::with_capacity(n) };
        for &x in v {
            let (r, s) = scaled(x);
            let mut lower = r as i32 as f64;
            let mut p = r - lower;
            if lower >= s {
                lower = s - 1.0;
                p = 1.0;
            }
            out.lower.push(lower as i32);
            out.negative.push((x.to_bits() >> 63) as i32);
            out.threshold.push((p * (1u64 << 53) as f64).ceil() as u64);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn encode_into(&self, rng: &RoundingStream, out: &mut [i32]) -> Result<()> {
        if out.len() != self.len() {
            return Err(Error::contract(format!("output buffer has {} slots for {} coordinates", out.len(), self.len())));
        }
        let coords = self.lower.iter().zip(&self.negative).zip(&self.threshold);
        for (i, (slot, ((&lower, &neg), &t))) in out.iter_mut().zip(coords).enumerate() {
            let up = i32::from(rng.bits53(i as u64) < t);
            *slot = ((lower + up) ^ -neg) + neg;
        }
        Ok(())
    }

    /// Number of coordinates rounded up, accumulated into `counts`.
    pub fn count_round_ups(&self, rng: &RoundingStream, counts: &mut [u32]) {
        for (i, (c, &t)) in counts.iter_mut().zip(&self.threshold).enumerate() {
            *c += u32::from(rng.bits53(i as u64) < t);
        }
    }

    /// Signed level coordinate `i` takes when not rounded up.
    pub fn lower_level(&self, i: usize) -> i32 {
        let neg = self.negative[i];
        (self.lower[i] ^ -neg) + neg
    }

    /// `+1` or `-1`: the change in level when coordinate `i` rounds up.
    pub fn step(&self, i: usize) -> i32 {
        1 - 2 * self.negative[i]
    }
}
