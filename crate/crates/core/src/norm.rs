//! Euclidean norms with bounded rounding error.

use crate::error::{Error, Result};

const PAIRWISE_BLOCK: usize = 64;

/// L2 norm of `v`, rejecting non-finite entries.
pub fn l2_norm(v: &[f64]) -> Result<f64> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value {} at coordinate {i}",
            v[i]
        )));
    }
    Ok(l2_norm_unchecked(v))
}

/// L2 norm of a vector already known to be finite.
///
/// Squares are taken after dividing by the largest magnitude, which keeps
/// the sum away from overflow and makes the result never smaller than
/// `max |v_i|` (the largest term contributes exactly 1.0).
pub(crate) fn l2_norm_unchecked(v: &[f64]) -> f64 {
    let peak = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if peak == 0.0 {
        return 0.0;
    }
    peak * pairwise_sum_sq(v, peak).sqrt()
}

fn pairwise_sum_sq(v: &[f64], peak: f64) -> f64 {
    if v.len() <= PAIRWISE_BLOCK {
        let mut acc = 0.0;
        for &x in v {
            // Division, not multiplication by 1/peak: peak/peak must be exactly 1.
            let y = x.abs() / peak;
            acc += y * y;
        }
        return acc;
    }
    let mid = v.len() / 2;
    pairwise_sum_sq(&v[..mid], peak) + pairwise_sum_sq(&v[mid..], peak)
}

/// Pairwise sum, used where many small terms are accumulated.
pub(crate) fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= PAIRWISE_BLOCK {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}
