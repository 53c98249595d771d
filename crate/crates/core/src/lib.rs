//! All-reduce compatible gradient compression.
//!
//! The crate provides max-norm stochastic quantizers (single- and
//! multi-scale), globally shared random-K sparsification, arbitrary-width
//! bit packing, a deterministic simulated collective layer with an exact
//! cost ledger, a data-parallel SGD driver over small convex and non-convex
//! tasks, and an analytical throughput model.
//!
//! The quantized payload of every scheme is a vector of signed integer
//! levels that can be summed across workers, so aggregation happens with a
//! plain all-reduce instead of an all-gather.

pub mod bitpack;
pub mod budget;
pub mod collectives;
pub mod error;
pub mod norm;
pub mod perfmodel;
pub mod quantize;
pub mod rng;
pub mod sparsify;
pub mod trainer;
pub mod types;
pub mod verify;

pub use budget::{bit_cost, lossless_level_width, nominal_level_width, BitBudget};
pub use error::{Error, Result};
pub use norm::l2_norm;
pub use rng::QuantRng;
pub use types::{
    GradientVector, LevelVector, MaxNorm, Quantizer, ScaleIndexVector, ScaleSet,
    SchemeDescriptor,
};
