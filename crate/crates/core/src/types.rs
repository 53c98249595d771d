//! Domain types shared by the quantizers, the collectives and the trainer.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norm::l2_norm_unchecked;

/// One worker's dense stochastic gradient. All entries are finite and the
/// vector is never empty.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("gradient vector must be non-empty".into()));
        }
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite value {} at coordinate {i}",
                values[i]
            )));
        }
        Ok(Self(values))
    }

    pub fn zeros(n: usize) -> Result<Self> {
        Self::new(vec![0.0; n])
    }

    pub fn l2_norm(&self) -> f64 {
        l2_norm_unchecked(&self.0)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for GradientVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Largest L2 norm among the workers' gradients; the shared normalizer.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MaxNorm(f64);

impl MaxNorm {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidInput(format!("max-norm must be finite and >= 0, got {value}")));
        }
        Ok(Self(value))
    }

    /// Max over per-worker norms.
    pub fn of(norms: &[f64]) -> Result<Self> {
        Self::new(norms.iter().fold(0.0_f64, |m, &x| m.max(x)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Signed quantization levels: the integer payload that is summed by the
/// all-reduce. `bound` is the largest level magnitude the producing
/// quantizer can emit (s, or the minimum scale for multi-scale).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelVector {
    levels: Vec<i32>,
    bound: u32,
}

impl LevelVector {
    pub fn new(levels: Vec<i32>, bound: u32) -> Result<Self> {
        if let Some(i) = levels.iter().position(|l| l.unsigned_abs() > bound) {
            return Err(Error::contract(format!(
                "level {} at coordinate {i} exceeds bound {bound}",
                levels[i]
            )));
        }
        Ok(Self { levels, bound })
    }

    pub(crate) fn from_parts(levels: Vec<i32>, bound: u32) -> Self {
        debug_assert!(levels.iter().all(|l| l.unsigned_abs() <= bound));
        Self { levels, bound }
    }

    pub fn levels(&self) -> &[i32] {
        &self.levels
    }

    pub fn bound(&self) -> u32 {
        self.bound
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn into_levels(self) -> Vec<i32> {
        self.levels
    }
}

/// Strictly increasing set of quantization scales. The first entry is the
/// minimum scale, which fixes the bit width of every coordinate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct ScaleSet(Vec<u32>);

impl ScaleSet {
    pub fn new(scales: Vec<u32>) -> Result<Self> {
        if scales.is_empty() {
            return Err(Error::config("scale set must contain at least one scale"));
        }
        if scales[0] < 1 {
            return Err(Error::config("scales must be >= 1"));
        }
        if scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("scales must be strictly increasing, got {scales:?}")));
        }
        if *scales.last().unwrap() > MAX_SCALE {
            return Err(Error::config(format!("scales must be <= {MAX_SCALE}")));
        }
        Ok(Self(scales))
    }

    pub fn scales(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_scale(&self) -> u32 {
        self.0[0]
    }

    pub fn max_scale(&self) -> u32 {
        *self.0.last().unwrap()
    }

    pub fn get(&self, index: u32) -> u32 {
        self.0[index as usize]
    }
}

impl TryFrom<Vec<u32>> for ScaleSet {
    type Error = Error;

    fn try_from(v: Vec<u32>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ScaleSet> for Vec<u32> {
    fn from(s: ScaleSet) -> Self {
        s.0
    }
}

/// Largest supported scale; keeps every level inside an `i32` and every
/// M-worker level sum inside an `i64`.
pub const MAX_SCALE: u32 = 1 << 30;

/// Per-coordinate index into a [`ScaleSet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaleIndexVector(Vec<u32>);

impl ScaleIndexVector {
    pub fn new(indices: Vec<u32>, scales: &ScaleSet) -> Result<Self> {
        if let Some(i) = indices.iter().position(|&x| x as usize >= scales.len()) {
            return Err(Error::contract(format!(
                "scale index {} at coordinate {i} out of range for {} scales",
                indices[i],
                scales.len()
            )));
        }
        Ok(Self(indices))
    }

    pub(crate) fn from_raw(indices: Vec<u32>) -> Self {
        Self(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The quantizer applied to a (possibly sparsified) gradient.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Quantizer {
    SingleScale { s: u32 },
    MultiScale { scales: ScaleSet },
}

impl Quantizer {
    /// Largest level magnitude this quantizer emits.
    pub fn level_bound(&self) -> u32 {
        match self {
            Quantizer::SingleScale { s } => *s,
            Quantizer::MultiScale { scales } => scales.min_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Quantizer::SingleScale { s } if *s < 1 || *s > MAX_SCALE => {
                Err(Error::config(format!("scale s must be in [1, {MAX_SCALE}], got {s}")))
            }
            _ => Ok(()),
        }
    }
}

/// Every supported compression scheme.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SchemeDescriptor {
    Uncompressed,
    QsgdMaxNorm { s: u32 },
    QsgdMaxNormMultiScale { scales: ScaleSet },
    GlobalRandK { k: usize, inner: Quantizer },
}

impl SchemeDescriptor {
    /// The quantizer this scheme applies, if any.
    pub fn quantizer(&self) -> Option<Quantizer> {
        match self {
            SchemeDescriptor::Uncompressed => None,
            SchemeDescriptor::QsgdMaxNorm { s } => Some(Quantizer::SingleScale { s: *s }),
            SchemeDescriptor::QsgdMaxNormMultiScale { scales } => {
                Some(Quantizer::MultiScale { scales: scales.clone() })
            }
            SchemeDescriptor::GlobalRandK { inner, .. } => Some(inner.clone()),
        }
    }

    /// Number of coordinates that are actually communicated for dimension `n`.
    pub fn communicated_coordinates(&self, n: usize) -> usize {
        match self {
            SchemeDescriptor::GlobalRandK { k, .. } => (*k).min(n),
            _ => n,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::config("dimension must be >= 1"));
        }
        match self {
            SchemeDescriptor::Uncompressed => Ok(()),
            SchemeDescriptor::QsgdMaxNorm { s } => Quantizer::SingleScale { s: *s }.validate(),
            SchemeDescriptor::QsgdMaxNormMultiScale { .. } => Ok(()),
            SchemeDescriptor::GlobalRandK { k, inner } => {
                if *k == 0 {
                    return Err(Error::config("K must be >= 1"));
                }
                if *k > n {
                    return Err(Error::config(format!("K = {k} exceeds dimension {n}")));
                }
                inner.validate()
            }
        }
    }

    /// Short name in the `qsgd-mn-4` / `grandk-mn-ts-4-8` style.
    pub fn label(&self) -> String {
        fn bits(s: u32) -> String {
            crate::budget::nominal_level_width(s).to_string()
        }
        fn quant(q: &Quantizer) -> String {
            match q {
                Quantizer::SingleScale { s } => bits(*s),
                Quantizer::MultiScale { scales } => {
                    let b: Vec<String> = scales.scales().iter().map(|&s| bits(s)).collect();
                    format!("ts-{}", b.join("-"))
                }
            }
        }
        match self {
            SchemeDescriptor::Uncompressed => "allreduce-sgd".into(),
            SchemeDescriptor::QsgdMaxNorm { s } => format!("qsgd-mn-{}", bits(*s)),
            SchemeDescriptor::QsgdMaxNormMultiScale { scales } => {
                format!("qsgd-mn-{}", quant(&Quantizer::MultiScale { scales: scales.clone() }))
            }
            SchemeDescriptor::GlobalRandK { inner, .. } => format!("grandk-mn-{}", quant(inner)),
        }
    }
}

impl fmt::Display for SchemeDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_vector_rejects_nan_and_empty() {
        assert!(GradientVector::new(vec![]).is_err());
        assert!(GradientVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(GradientVector::new(vec![1.0, -2.0]).is_ok());
    }

    #[test]
    fn scale_set_validation() {
        assert!(ScaleSet::new(vec![]).is_err());
        assert!(ScaleSet::new(vec![0, 4]).is_err());
        assert!(ScaleSet::new(vec![4, 4]).is_err());
        assert!(ScaleSet::new(vec![16, 4]).is_err());
        let s = ScaleSet::new(vec![4, 16]).unwrap();
        assert_eq!(s.min_scale(), 4);
        assert_eq!(s.max_scale(), 16);
    }

    #[test]
    fn level_vector_enforces_bound() {
        assert!(LevelVector::new(vec![-4, 4, 0], 4).is_ok());
        assert!(LevelVector::new(vec![5], 4).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(SchemeDescriptor::Uncompressed.label(), "allreduce-sgd");
        assert_eq!(SchemeDescriptor::QsgdMaxNorm { s: 8 }.label(), "qsgd-mn-4");
        let ts = ScaleSet::new(vec![128, 2048]).unwrap();
        assert_eq!(SchemeDescriptor::QsgdMaxNormMultiScale { scales: ts.clone() }.label(), "qsgd-mn-ts-8-12");
        assert_eq!(
            SchemeDescriptor::GlobalRandK { k: 10, inner: Quantizer::MultiScale { scales: ts } }.label(),
            "grandk-mn-ts-8-12"
        );
    }

    #[test]
    fn randk_validation() {
        let inner = Quantizer::SingleScale { s: 4 };
        assert!(SchemeDescriptor::GlobalRandK { k: 0, inner: inner.clone() }.validate(10).is_err());
        assert!(SchemeDescriptor::GlobalRandK { k: 11, inner: inner.clone() }.validate(10).is_err());
        assert!(SchemeDescriptor::GlobalRandK { k: 10, inner }.validate(10).is_ok());
    }
}
