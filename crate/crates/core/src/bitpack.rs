//! Arbitrary-width packing of signed levels.
//!
//! Buffer layout (all multi-byte fields little-endian):
//!
//! | offset | size | field                                     |
//! |--------|------|-------------------------------------------|
//! | 0      | 1    | magic `0x9C`                              |
//! | 1      | 1    | format version (`1`)                      |
//! | 2      | 1    | scheme tag ([`SchemeTag`])                |
//! | 3      | 1    | level width `r` in bits, 1..=32           |
//! | 4      | 1    | scale-index width in bits, 0 if absent    |
//! | 5      | 4    | coordinate count `n` (u32)                |
//! | 9      | 4    | max-norm as IEEE-754 binary32             |
//! | 13     | ...  | level stream, `ceil(n·r/8)` bytes         |
//! | ...    | ...  | scale-index stream, `ceil(n·w/8)` bytes   |
//!
//! Within a stream, coordinate `j` occupies bits `[j·r, (j+1)·r)` where bit
//! `k` is bit `k % 8` of byte `k / 8`. Levels are stored as `r`-bit two's
//! complement; scale indices as unsigned fields.

use crate::error::{Error, Result};

pub const MAGIC: u8 = 0x9C;
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;
pub const MAX_WIDTH: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum SchemeTag {
    /// Levels without a normalizer (plain packing).
    Raw = 0,
    SingleScale = 1,
    MultiScale = 2,
}

impl TryFrom<u8> for SchemeTag {
    type Error = Error;

    fn try_from(b: u8) -> Result<Self> {
        match b {
            0 => Ok(SchemeTag::Raw),
            1 => Ok(SchemeTag::SingleScale),
            2 => Ok(SchemeTag::MultiScale),
            other => Err(Error::Decode(format!("unknown scheme tag {other}"))),
        }
    }
}

/// Header plus packed level (and optional scale-index) streams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBuffer {
    bytes: Vec<u8>,
}

/// Bytes needed for `count` fields of `width` bits.
pub fn stream_len(count: usize, width: u32) -> usize {
    (count as u64 * u64::from(width)).div_ceil(8) as usize
}

struct BitWriter {
    out: Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        Self { out, acc: 0, filled: 0 }
    }

    #[inline]
    fn push(&mut self, value: u32, width: u32) {
        let mask = if width == 32 { u64::from(u32::MAX) } else { (1u64 << width) - 1 };
        self.acc |= (u64::from(value) & mask) << self.filled;
        self.filled += width;
        while self.filled >= 8 {
            self.out.push(self.acc as u8);
            self.acc >>= 8;
            self.filled -= 8;
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.filled > 0 {
            self.out.push(self.acc as u8);
        }
        self.out
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    acc: u64,
    filled: u32,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0, acc: 0, filled: 0 }
    }

    #[inline]
    fn pull(&mut self, width: u32) -> u32 {
        while self.filled < width {
            self.acc |= u64::from(self.bytes[self.pos]) << self.filled;
            self.pos += 1;
            self.filled += 8;
        }
        let mask = if width == 32 { u64::from(u32::MAX) } else { (1u64 << width) - 1 };
        let v = (self.acc & mask) as u32;
        self.acc >>= width;
        self.filled -= width;
        v
    }
}

fn check_width(width: u32) -> Result<()> {
    if !(1..=MAX_WIDTH).contains(&width) {
        return Err(Error::config(format!("bit width must be in [1, {MAX_WIDTH}], got {width}")));
    }
    Ok(())
}

/// Inclusive range of `width`-bit two's complement values.
pub fn level_range(width: u32) -> (i64, i64) {
    let half = 1i64 << (width - 1);
    (-half, half - 1)
}

fn header(tag: SchemeTag, width: u32, index_width: u32, n: usize, wnorm: f32) -> Result<Vec<u8>> {
    let n32 = u32::try_from(n).map_err(|_| Error::config(format!("{n} coordinates exceed the u32 count field")))?;
    let mut out = Vec::with_capacity(HEADER_LEN + stream_len(n, width) + stream_len(n, index_width));
    out.extend_from_slice(&[MAGIC, VERSION, tag as u8, width as u8, index_width as u8]);
    out.extend_from_slice(&n32.to_le_bytes());
    out.extend_from_slice(&wnorm.to_le_bytes());
    Ok(out)
}

fn write_levels(out: Vec<u8>, levels: &[i32], width: u32) -> Result<Vec<u8>> {
    let (lo, hi) = level_range(width);
    let mut w = BitWriter::new(out);
    for (i, &l) in levels.iter().enumerate() {
        if i64::from(l) < lo || i64::from(l) > hi {
            return Err(Error::contract(format!(
                "level {l} at coordinate {i} does not fit in {width} bits [{lo}, {hi}]"
            )));
        }
        w.push(l as u32, width);
    }
    Ok(w.finish())
}

/// Pack `levels` at `width` bits each with an empty normalizer.
pub fn pack(levels: &[i32], width: u32) -> Result<PackedBuffer> {
    PackedBuffer::single_scale(levels, width, 0.0, SchemeTag::Raw)
}

/// Exact inverse of [`pack`] (and of the level stream of any buffer).
pub fn unpack(buf: &PackedBuffer) -> Result<Vec<i32>> {
    buf.levels()
}

impl PackedBuffer {
    /// Levels of a single-scale (or raw) payload.
    pub fn single_scale(levels: &[i32], width: u32, wnorm: f32, tag: SchemeTag) -> Result<Self> {
        check_width(width)?;
        let out = header(tag, width, 0, levels.len(), wnorm)?;
        Ok(Self { bytes: write_levels(out, levels, width)? })
    }

    /// Levels plus the shared scale-index stream.
    pub fn multi_scale(
        levels: &[i32],
        width: u32,
        indices: &[u32],
        index_width: u32,
        wnorm: f32,
    ) -> Result<Self> {
        check_width(width)?;
        if index_width > MAX_WIDTH {
            return Err(Error::config(format!("index width {index_width} exceeds {MAX_WIDTH}")));
        }
        if indices.len() != levels.len() {
            return Err(Error::contract(format!(
                "{} levels but {} scale indices",
                levels.len(),
                indices.len()
            )));
        }
        let out = header(SchemeTag::MultiScale, width, index_width, levels.len(), wnorm)?;
        let out = write_levels(out, levels, width)?;
        if index_width == 0 {
            if let Some(i) = indices.iter().position(|&x| x != 0) {
                return Err(Error::contract(format!("scale index at coordinate {i} needs a non-zero width")));
            }
            return Ok(Self { bytes: out });
        }
        let limit = if index_width == 32 { u64::from(u32::MAX) } else { (1u64 << index_width) - 1 };
        let mut w = BitWriter::new(out);
        for (i, &x) in indices.iter().enumerate() {
            if u64::from(x) > limit {
                return Err(Error::contract(format!(
                    "scale index {x} at coordinate {i} does not fit in {index_width} bits"
                )));
            }
            w.push(x, index_width);
        }
        Ok(Self { bytes: w.finish() })
    }

    /// Parse and validate a serialized buffer.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Decode(format!(
                "truncated header: {} of {HEADER_LEN} bytes",
                bytes.len()
            )));
        }
        if bytes[0] != MAGIC {
            return Err(Error::Decode(format!("bad magic byte {:#04x}", bytes[0])));
        }
        if bytes[1] != VERSION {
            return Err(Error::Decode(format!("unsupported version {}", bytes[1])));
        }
        SchemeTag::try_from(bytes[2])?;
        let width = u32::from(bytes[3]);
        let index_width = u32::from(bytes[4]);
        if !(1..=MAX_WIDTH).contains(&width) || index_width > MAX_WIDTH {
            return Err(Error::Decode(format!("invalid widths r = {width}, index = {index_width}")));
        }
        let buf = Self { bytes };
        let want = HEADER_LEN + stream_len(buf.count(), width) + stream_len(buf.count(), index_width);
        if buf.bytes.len() < want {
            return Err(Error::Decode(format!(
                "truncated payload: {} of {want} bytes",
                buf.bytes.len()
            )));
        }
        if buf.bytes.len() > want {
            return Err(Error::Decode(format!(
                "{} trailing bytes after payload",
                buf.bytes.len() - want
            )));
        }
        Ok(buf)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn tag(&self) -> SchemeTag {
        SchemeTag::try_from(self.bytes[2]).expect("validated on construction")
    }

    pub fn width_bits(&self) -> u32 {
        u32::from(self.bytes[3])
    }

    pub fn index_width_bits(&self) -> u32 {
        u32::from(self.bytes[4])
    }

    pub fn count(&self) -> usize {
        u32::from_le_bytes(self.bytes[5..9].try_into().unwrap()) as usize
    }

    pub fn wnorm(&self) -> f32 {
        f32::from_le_bytes(self.bytes[9..13].try_into().unwrap())
    }

    /// Bytes after the header.
    pub fn payload_len(&self) -> usize {
        self.bytes.len() - HEADER_LEN
    }

    pub fn levels(&self) -> Result<Vec<i32>> {
        let (n, width) = (self.count(), self.width_bits());
        let len = stream_len(n, width);
        let stream = self
            .bytes
            .get(HEADER_LEN..HEADER_LEN + len)
            .ok_or_else(|| Error::Decode("truncated level stream".into()))?;
        let mut r = BitReader::new(stream);
        let shift = 32 - width;
        Ok((0..n).map(|_| ((r.pull(width) << shift) as i32) >> shift).collect())
    }

    /// Scale indices of a multi-scale buffer (all zero when the width is 0).
    pub fn scale_indices(&self) -> Result<Vec<u32>> {
        let (n, width) = (self.count(), self.index_width_bits());
        if width == 0 {
            return Ok(vec![0; n]);
        }
        let start = HEADER_LEN + stream_len(n, self.width_bits());
        let stream = self
            .bytes
            .get(start..start + stream_len(n, width))
            .ok_or_else(|| Error::Decode("truncated scale-index stream".into()))?;
        let mut r = BitReader::new(stream);
        Ok((0..n).map(|_| r.pull(width)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn three_bit_round_trip() {
        let buf = pack(&[-2, 3, 0], 3).unwrap();
        assert_eq!(unpack(&buf).unwrap(), vec![-2, 3, 0]);
        assert_eq!(buf.payload_len(), 2);
    }

    #[test]
    fn empty_levels_are_header_only() {
        let buf = pack(&[], 5).unwrap();
        assert_eq!(buf.as_bytes().len(), HEADER_LEN);
        assert!(unpack(&buf).unwrap().is_empty());
    }

    #[test]
    fn payload_size_for_1024_five_bit_levels() {
        let levels: Vec<i32> = (0..1024).map(|i| (i % 31) - 15).collect();
        let buf = pack(&levels, 5).unwrap();
        assert_eq!(buf.payload_len(), 640);
        assert_eq!(unpack(&buf).unwrap(), levels);
    }

    #[test]
    fn out_of_range_level_names_index() {
        let err = pack(&[0, 1, 4], 3).unwrap_err();
        match err {
            Error::Contract(msg) => assert!(msg.contains("coordinate 2"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(pack(&[-5], 3).is_err());
        assert!(pack(&[0], 0).is_err());
        assert!(pack(&[0], 33).is_err());
    }

    #[test]
    fn bit_layout_is_little_endian() {
        // 4-bit fields: 1 then -1 (0xF) → byte 0 = 0xF1.
        let buf = pack(&[1, -1], 4).unwrap();
        assert_eq!(&buf.as_bytes()[HEADER_LEN..], &[0xF1]);
        let buf = pack(&[1, 0, 1], 1 + 1).unwrap();
        assert_eq!(&buf.as_bytes()[HEADER_LEN..], &[0b0001_0001]);
    }

    #[test]
    fn header_fields() {
        let buf = PackedBuffer::single_scale(&[1, 2, 3], 4, 2.5, SchemeTag::SingleScale).unwrap();
        let parsed = PackedBuffer::from_bytes(buf.as_bytes().to_vec()).unwrap();
        assert_eq!(parsed.tag(), SchemeTag::SingleScale);
        assert_eq!(parsed.width_bits(), 4);
        assert_eq!(parsed.count(), 3);
        assert_eq!(parsed.wnorm(), 2.5);
        assert_eq!(parsed.levels().unwrap(), vec![1, 2, 3]);
    }

    #[test]
    fn multi_scale_streams() {
        let buf = PackedBuffer::multi_scale(&[3, -4, 0, 1], 4, &[0, 1, 1, 0], 1, 1.0).unwrap();
        assert_eq!(buf.payload_len(), 2 + 1);
        let parsed = PackedBuffer::from_bytes(buf.into_bytes()).unwrap();
        assert_eq!(parsed.levels().unwrap(), vec![3, -4, 0, 1]);
        assert_eq!(parsed.scale_indices().unwrap(), vec![0, 1, 1, 0]);
        assert!(PackedBuffer::multi_scale(&[0], 4, &[2], 1, 1.0).is_err());
    }

    #[test]
    fn truncated_and_corrupt_buffers() {
        let buf = pack(&[1, 2, 3, 4, 5], 7).unwrap();
        let mut bytes = buf.into_bytes();
        bytes.pop();
        assert!(matches!(PackedBuffer::from_bytes(bytes.clone()), Err(Error::Decode(_))));
        assert!(matches!(PackedBuffer::from_bytes(bytes[..5].to_vec()), Err(Error::Decode(_))));
        bytes[0] = 0;
        assert!(matches!(PackedBuffer::from_bytes(bytes), Err(Error::Decode(_))));
    }

    #[test]
    fn exhaustive_small_widths() {
        for width in 1..=4u32 {
            let (lo, hi) = level_range(width);
            let all: Vec<i32> = (lo..=hi).map(|x| x as i32).collect();
            // every value, and every ordered pair so each value appears at every bit offset
            let mut pairs = Vec::new();
            for &a in &all {
                for &b in &all {
                    pairs.push(a);
                    pairs.push(b);
                }
            }
            assert_eq!(unpack(&pack(&pairs, width).unwrap()).unwrap(), pairs);
        }
    }

    #[test]
    fn full_32_bit_range() {
        let v = vec![i32::MIN, i32::MAX, -1, 0, 1];
        assert_eq!(unpack(&pack(&v, 32).unwrap()).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip(width in 1u32..=32, raw in prop::collection::vec(any::<i64>(), 0..300)) {
            let (lo, hi) = level_range(width);
            let levels: Vec<i32> = raw.iter().map(|&x| (lo + x.rem_euclid(hi - lo + 1)) as i32).collect();
            let buf = pack(&levels, width).unwrap();
            prop_assert_eq!(buf.payload_len(), stream_len(levels.len(), width));
            let parsed = PackedBuffer::from_bytes(buf.into_bytes()).unwrap();
            prop_assert_eq!(unpack(&parsed).unwrap(), levels);
        }
    }
}
