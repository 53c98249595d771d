//! Counter-based randomness for stochastic rounding.
//!
//! A draw is a pure function of `(seed, worker, iteration, coordinate)`, so
//! encoding needs no mutable generator state and any coordinate can be
//! evaluated independently, in any order, on any thread.

const WY_INCREMENT: u64 = 0xa076_1d64_78bd_642f;
const WY_XOR: u64 = 0xe703_7ed1_a0b4_28db;
const WORKER_MIX: u64 = 0xd1b5_4a32_d192_ed03;
const ITER_MIX: u64 = 0x8cb9_2ba7_2f3d_8dd7;

/// SplitMix64 output function.
#[inline(always)]
pub(crate) fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded source of per-coordinate uniforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantRng {
    seed: u64,
}

impl QuantRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The stream used by `worker` at `iteration`.
    pub fn stream(&self, worker: u64, iteration: u64) -> RoundingStream {
        let k = mix64(self.seed ^ mix64(worker.wrapping_add(1).wrapping_mul(WORKER_MIX)));
        let k = mix64(k ^ mix64(iteration.wrapping_add(1).wrapping_mul(ITER_MIX)));
        RoundingStream { key: k }
    }

    /// Uniform draw in `[0, 1)` for one coordinate.
    pub fn uniform(&self, worker: u64, iteration: u64, coordinate: u64) -> f64 {
        self.stream(worker, iteration).uniform(coordinate)
    }
}

/// A keyed counter-based sequence indexed by coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundingStream {
    key: u64,
}

impl RoundingStream {
    /// Fixed stream for code paths that only validate inputs.
    pub(crate) const ZERO: RoundingStream = RoundingStream { key: 0 };

    /// Weyl sequence position `key + (coordinate+1)·W`, finalized with a
    /// folded 64×64→128 multiply (the wyrand output function).
    #[inline(always)]
    pub fn bits(&self, coordinate: u64) -> u64 {
        let x = self.key.wrapping_add(coordinate.wrapping_add(1).wrapping_mul(WY_INCREMENT));
        let t = u128::from(x).wrapping_mul(u128::from(x ^ WY_XOR));
        ((t >> 64) as u64) ^ (t as u64)
    }

    /// Top 53 bits of the coordinate's word.
    #[inline(always)]
    pub fn bits53(&self, coordinate: u64) -> u64 {
        self.bits(coordinate) >> 11
    }

    /// Uniform in `[0, 1)`: `bits53 · 2⁻⁵³`.
    #[inline(always)]
    pub fn uniform(&self, coordinate: u64) -> f64 {
        self.bits53(coordinate) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}
