//! Otsu thresholding on a fixed-width histogram.

use alloc::format;
use alloc::vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Span below which the input is treated as constant and no threshold is
/// applied.
pub const DEGENERATE_SPAN: f64 = 1e-9;

/// Outcome of a threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult<T> {
    /// Chosen threshold; values strictly above it survive masking.
    pub threshold: T,
    /// Weighted intra-class variance at the chosen threshold.
    pub intra_class_variance: f64,
    /// True when the input span is (near) zero and masking must be skipped.
    pub degenerate: bool,
}

/// Threshold minimizing the weighted intra-class variance over a histogram
/// of `bins` equal-width bins spanning [min, max].
///
/// Every interior bin boundary is tried; ties resolve to the lowest
/// boundary. A near-constant input returns `degenerate = true` with the
/// minimum as threshold.
pub fn otsu_threshold<T: Real>(values: &[T], bins: usize) -> Result<OtsuResult<T>> {
    if values.is_empty() {
        return Err(CoreError::Argument("otsu threshold of an empty slice".into()));
    }
    if bins < 2 {
        return Err(CoreError::Config(format!("otsu needs at least 2 bins, got {bins}")));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        let v = v.to_f64();
        if !v.is_finite() {
            return Err(CoreError::NonFinite("otsu input contains a non-finite value".into()));
        }
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = hi - lo;
    if span < DEGENERATE_SPAN {
        return Ok(OtsuResult {
            threshold: T::from_f64(lo),
            intra_class_variance: 0.0,
            degenerate: true,
        });
    }

    let mut counts = vec![0u64; bins];
    let mut sums = vec![0.0f64; bins];
    let mut sq_sums = vec![0.0f64; bins];
    for v in values {
        let v = v.to_f64();
        let mut b = ((v - lo) / span * bins as f64) as usize;
        if b >= bins {
            b = bins - 1;
        }
        counts[b] += 1;
        sums[b] += v;
        sq_sums[b] += v * v;
    }

    // Prefix scan; candidate boundary j splits bins [0, j) from [j, bins).
    let total_n = values.len() as f64;
    let total_sum: f64 = sums.iter().sum();
    let total_sq: f64 = sq_sums.iter().sum();

    let mut best_j = 0usize;
    let mut best_var = f64::INFINITY;
    let mut n0 = 0.0f64;
    let mut s0 = 0.0f64;
    let mut q0 = 0.0f64;
    for j in 1..bins {
        n0 += counts[j - 1] as f64;
        s0 += sums[j - 1];
        q0 += sq_sums[j - 1];
        let n1 = total_n - n0;
        if n0 == 0.0 || n1 == 0.0 {
            continue;
        }
        // Weighted intra-class variance: w0*var0 + w1*var1.
        let var0 = q0 / n0 - (s0 / n0) * (s0 / n0);
        let s1 = total_sum - s0;
        let q1 = total_sq - q0;
        let var1 = q1 / n1 - (s1 / n1) * (s1 / n1);
        let within = (n0 * var0.max(0.0) + n1 * var1.max(0.0)) / total_n;
        if within < best_var {
            best_var = within;
            best_j = j;
        }
    }
    if best_j == 0 {
        // All mass in one bin despite a non-degenerate span: boundaries exist
        // but every split left one side empty except at the occupied bin edge.
        // Fall back to the first boundary above the occupied bin.
        let occupied = counts.iter().position(|&c| c > 0).unwrap_or(0);
        best_j = (occupied + 1).min(bins - 1);
        best_var = 0.0;
    }
    let threshold = lo + span * best_j as f64 / bins as f64;
    Ok(OtsuResult {
        threshold: T::from_f64(threshold),
        intra_class_variance: best_var,
        degenerate: false,
    })
}

/// Weighted intra-class variance of splitting `values` at `t`
/// (strictly-greater goes to the upper class). Exact, histogram-free;
/// used by tests as the brute-force reference and by the optimality check.
pub fn intra_class_variance(values: &[f64], t: f64) -> f64 {
    let (mut n0, mut s0, mut q0) = (0.0f64, 0.0f64, 0.0f64);
    let (mut n1, mut s1, mut q1) = (0.0f64, 0.0f64, 0.0f64);
    for &v in values {
        if v > t {
            n1 += 1.0;
            s1 += v;
            q1 += v * v;
        } else {
            n0 += 1.0;
            s0 += v;
            q0 += v * v;
        }
    }
    let total = n0 + n1;
    let var0 = if n0 > 0.0 { (q0 / n0 - (s0 / n0) * (s0 / n0)).max(0.0) } else { 0.0 };
    let var1 = if n1 > 0.0 { (q1 / n1 - (s1 / n1) * (s1 / n1)).max(0.0) } else { 0.0 };
    (n0 * var0 + n1 * var1) / total
}
