//! User-facing scheme names and the bits-to-levels mapping.
//!
//! Flags speak in bits per coordinate, as in `qsgd-mn-8`. A width of `r`
//! bits holds a sign and `ceil(log2 s)` magnitude bits, so the largest
//! scale that fits is `s = 2^(r-1)`.

use std::fmt;
use std::str::FromStr;

use anyhow::{bail, Result};
use gradcomp::{nominal_level_width, Quantizer, ScaleSet, SchemeDescriptor};
use serde::Deserialize;

/// Default number of coordinates kept by the random-K schemes.
pub const DEFAULT_K: usize = 10_000;

/// Widest supported level, matching the largest admissible scale.
pub const MAX_BITS: u32 = 31;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    AllreduceSgd,
    QsgdMn,
    QsgdMnTs,
    GrandkMn,
    GrandkMnTs,
}

impl SchemeName {
    pub const ALL: [SchemeName; 5] =
        [SchemeName::AllreduceSgd, SchemeName::QsgdMn, SchemeName::QsgdMnTs, SchemeName::GrandkMn, SchemeName::GrandkMnTs];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemeName::AllreduceSgd => "allreduce-sgd",
            SchemeName::QsgdMn => "qsgd-mn",
            SchemeName::QsgdMnTs => "qsgd-mn-ts",
            SchemeName::GrandkMn => "grandk-mn",
            SchemeName::GrandkMnTs => "grandk-mn-ts",
        }
    }

    fn multi_scale(self) -> bool {
        matches!(self, SchemeName::QsgdMnTs | SchemeName::GrandkMnTs)
    }
}

impl fmt::Display for SchemeName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SchemeName {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match SchemeName::ALL.into_iter().find(|n| n.as_str() == s) {
            Some(n) => Ok(n),
            None => bail!(
                "unknown scheme {s:?}; expected one of {}",
                SchemeName::ALL.map(|n| n.as_str()).join(", ")
            ),
        }
    }
}

/// One width or a list of widths (one per scale).
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(untagged)]
pub enum Bits {
    One(u32),
    Many(Vec<u32>),
}

impl Bits {
    pub fn widths(&self) -> Vec<u32> {
        match self {
            Bits::One(b) => vec![*b],
            Bits::Many(v) => v.clone(),
        }
    }
}

impl FromStr for Bits {
    type Err = anyhow::Error;

    /// `4` or `6,10`.
    fn from_str(s: &str) -> Result<Self> {
        let parts = s
            .split(',')
            .map(|p| p.trim().parse::<u32>().map_err(|_| anyhow::anyhow!("bad bit width {p:?} in {s:?}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(match parts.as_slice() {
            [one] => Bits::One(*one),
            _ => Bits::Many(parts),
        })
    }
}

/// A scheme as written in a config file or on the command line.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSpec {
    pub name: SchemeName,
    #[serde(default)]
    pub bits: Option<Bits>,
    /// Coordinates kept by the random-K schemes.
    #[serde(default)]
    pub k: Option<usize>,
}

impl FromStr for SchemeSpec {
    type Err = anyhow::Error;

    /// `name[:bits[:k]]`, e.g. `qsgd-mn:4`, `qsgd-mn-ts:6,10`, `grandk-mn:2:5000`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default().parse()?;
        let bits = parts.next().map(str::parse).transpose()?;
        let k = parts
            .next()
            .map(|k| k.parse::<usize>().map_err(|_| anyhow::anyhow!("bad K {k:?} in {s:?}")))
            .transpose()?;
        if parts.next().is_some() {
            bail!("too many ':' fields in scheme {s:?}");
        }
        Ok(SchemeSpec { name, bits, k })
    }
}

/// `s = 2^(bits-1)`.
pub fn levels_for_bits(bits: u32) -> Result<u32> {
    if !(1..=MAX_BITS).contains(&bits) {
        bail!("bits must be in [1, {MAX_BITS}], got {bits}");
    }
    Ok(1u32 << (bits - 1))
}

impl SchemeSpec {
    /// Resolve against a model with `dim` parameters. `K` defaults to
    /// [`DEFAULT_K`] and is clamped to `dim`.
    pub fn descriptor(&self, dim: usize) -> Result<SchemeDescriptor> {
        if self.name == SchemeName::AllreduceSgd {
            if self.bits.is_some() || self.k.is_some() {
                bail!("allreduce-sgd takes neither bits nor k");
            }
            return Ok(SchemeDescriptor::Uncompressed);
        }
        let Some(bits) = &self.bits else {
            bail!("scheme {} needs bits", self.name);
        };
        let widths = bits.widths();
        if !self.name.multi_scale() && widths.len() != 1 {
            bail!("scheme {} takes a single bit width, got {widths:?}", self.name);
        }
        let scales = widths.iter().map(|&b| levels_for_bits(b)).collect::<Result<Vec<_>>>()?;
        let quantizer = if self.name.multi_scale() {
            Quantizer::MultiScale { scales: ScaleSet::new(scales)? }
        } else {
            Quantizer::SingleScale { s: scales[0] }
        };
        let is_randk = matches!(self.name, SchemeName::GrandkMn | SchemeName::GrandkMnTs);
        if !is_randk && self.k.is_some() {
            bail!("k only applies to the grandk schemes");
        }
        Ok(match (quantizer, is_randk) {
            (inner, true) => SchemeDescriptor::GlobalRandK { k: self.k.unwrap_or(DEFAULT_K).min(dim), inner },
            (Quantizer::SingleScale { s }, false) => SchemeDescriptor::QsgdMaxNorm { s },
            (Quantizer::MultiScale { scales }, false) => SchemeDescriptor::QsgdMaxNormMultiScale { scales },
        })
    }
}

/// Text printed by `--explain-schemes`.
pub fn explain() -> String {
    let mut out = String::new();
    out.push_str("Schemes\n");
    out.push_str("  allreduce-sgd   uncompressed 32-bit gradients, summed with a ring all-reduce\n");
    out.push_str("  qsgd-mn         max-norm stochastic quantization, one scale (bits = B)\n");
    out.push_str("  qsgd-mn-ts      max-norm quantization with per-coordinate scale choice (bits = B1,B2,...)\n");
    out.push_str("  grandk-mn       K shared random coordinates, then qsgd-mn (bits = B, k = K)\n");
    out.push_str("  grandk-mn-ts    K shared random coordinates, then qsgd-mn-ts\n");
    out.push_str(&format!("  K defaults to {DEFAULT_K} and is clamped to the model size.\n\n"));
    out.push_str("Bits to levels: s = 2^(bits-1); a level takes ceil(log2 s) + 1 bits\n");
    out.push_str("  bits  levels s  charged bits\n");
    for bits in 1..=16 {
        let s = levels_for_bits(bits).expect("in range");
        out.push_str(&format!("  {bits:>4}  {s:>8}  {:>12}\n", nominal_level_width(s)));
    }
    out.push_str("\nMulti-scale schemes charge ceil(log2 N) extra bits per coordinate for N scales,\n");
    out.push_str("and the level width of the smallest scale.\n");
    out
}
