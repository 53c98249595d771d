//! Globally shared random-K coordinate selection.
//!
//! The selected set is a function of `(shared_seed, iteration)` only, so
//! every worker derives the same K coordinates without communicating any
//! indices. No rescaling and no residual accumulation is applied: the
//! unselected coordinates simply receive no update that iteration, which
//! biases the update toward zero on them.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::types::GradientVector;

/// Strictly increasing coordinate indices in `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSet {
    indices: Vec<usize>,
    n: usize,
}

impl IndexSet {
    pub fn new(indices: Vec<usize>, n: usize) -> Result<Self> {
        if indices.len() > n {
            return Err(Error::config(format!("{} indices for dimension {n}", indices.len())));
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("indices must be strictly increasing"));
        }
        if let Some(&last) = indices.last() {
            if last >= n {
                return Err(Error::contract(format!("index {last} out of range for dimension {n}")));
            }
        }
        Ok(Self { indices, n })
    }

    /// Every coordinate of an `n`-dimensional vector.
    pub fn full(n: usize) -> Self {
        Self { indices: (0..n).collect(), n }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// K distinct coordinates drawn uniformly without replacement.
///
/// Uses a partial Fisher-Yates shuffle over a sparse swap map, so the cost
/// is O(K) regardless of `n`. The ChaCha stream id is the iteration, which
/// keeps iterations independent under one shared seed.
pub fn global_randk_indices(shared_seed: u64, iteration: u64, n: usize, k: usize) -> Result<IndexSet> {
    if k == 0 {
        return Err(Error::config("K must be >= 1"));
    }
    if k > n {
        return Err(Error::config(format!("K = {k} exceeds dimension {n}")));
    }
    if k == n {
        return Ok(IndexSet::full(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shared_seed);
    rng.set_stream(iteration);
    let mut swapped: HashMap<usize, usize> = HashMap::with_capacity(2 * k);
    let mut picked = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.random_range(i..n);
        let at_j = *swapped.get(&j).unwrap_or(&j);
        let at_i = *swapped.get(&i).unwrap_or(&i);
        swapped.insert(j, at_i);
        picked.push(at_j);
    }
    picked.sort_unstable();
    Ok(IndexSet { indices: picked, n })
}

/// `out[j] = v[idx[j]]`.
pub fn gather(v: &[f64], idx: &IndexSet) -> Result<GradientVector> {
    if idx.dimension() != v.len() {
        return Err(Error::contract(format!(
            "index set is for dimension {}, vector has {}",
            idx.dimension(),
            v.len()
        )));
    }
    GradientVector::new(idx.indices().iter().map(|&i| v[i]).collect())
}

/// Length-`n` vector with `sub[j]` at `idx[j]` and zeros elsewhere.
pub fn scatter(sub: &[f64], idx: &IndexSet, n: usize) -> Result<GradientVector> {
    if sub.len() != idx.len() {
        return Err(Error::contract(format!(
            "{} values for {} indices",
            sub.len(),
            idx.len()
        )));
    }
    if idx.dimension() != n {
        return Err(Error::contract(format!(
            "index set is for dimension {}, requested {n}",
            idx.dimension()
        )));
    }
    let mut out = vec![0.0; n];
    for (&i, &x) in idx.indices().iter().zip(sub) {
        out[i] = x;
    }
    GradientVector::new(out)
}
