//! Pooling operators reducing a heatmap channel to a single probability.
//!
//! SmoothMax is the default: a Boltzmann-weighted mean that interpolates
//! between the arithmetic mean (alpha -> 0) and the maximum (alpha -> inf)
//! while keeping a dense gradient. Max and LP pooling exist as ablation
//! alternatives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Boltzmann-weighted pooling: sum_i h_i exp(alpha h_i) / sum_i exp(alpha h_i).
///
/// Computed with max-subtraction so large alpha cannot overflow. The result
/// always lies in [min(h), max(h)].
pub fn smoothmax_pool<T: Real>(values: &[T], alpha: f64) -> Result<T> {
    if values.is_empty() {
        return Err(CoreError::Argument("smoothmax of an empty channel".into()));
    }
    if alpha <= 0.0 {
        return Err(CoreError::Config(format!("smoothmax alpha must be > 0, got {alpha}")));
    }
    let m = values.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for v in values {
        let v = v.to_f64();
        let w = libm::exp(alpha * (v - m));
        num += v * w;
        den += w;
    }
    Ok(T::from_f64(num / den))
}

/// Gradient of `smoothmax_pool` with respect to every input entry:
/// dy/dh_j = (w_j / sum w) * (1 + alpha (h_j - y)).
pub fn smoothmax_backward<T: Real>(values: &[T], alpha: f64, d_y: T) -> Result<Vec<T>> {
    let y = smoothmax_pool(values, alpha)?.to_f64();
    let m = values.iter().fold(f64::NEG_INFINITY, |acc, v| acc.max(v.to_f64()));
    let mut den = 0.0f64;
    for v in values {
        den += libm::exp(alpha * (v.to_f64() - m));
    }
    let dy = d_y.to_f64();
    let mut out = vec![T::ZERO; values.len()];
    for (o, v) in out.iter_mut().zip(values.iter()) {
        let v = v.to_f64();
        let w = libm::exp(alpha * (v - m)) / den;
        *o = T::from_f64(dy * w * (1.0 + alpha * (v - y)));
    }
    Ok(out)
}

/// Maximum entry; on ties the first maximizer in storage order is reported.
pub fn max_pool<T: Real>(values: &[T]) -> Result<(T, usize)> {
    if values.is_empty() {
        return Err(CoreError::Argument("max pool of an empty channel".into()));
    }
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    Ok((values[best], best))
}

/// Subgradient of `max_pool`: everything flows to the first argmax.
pub fn max_pool_backward<T: Real>(len: usize, argmax: usize, d_y: T) -> Vec<T> {
    let mut out = vec![T::ZERO; len];
    out[argmax] = d_y;
    out
}

/// LP pooling: (mean_i h_i^p)^(1/p). Values may leave [0, 1]; callers clip
/// before using the result as a probability.
pub fn lp_pool<T: Real>(values: &[T], p: f64) -> Result<T> {
    if values.is_empty() {
        return Err(CoreError::Argument("lp pool of an empty channel".into()));
    }
    if p < 2.0 {
        return Err(CoreError::Config(format!("lp pool exponent must be >= 2, got {p}")));
    }
    let n = values.len() as f64;
    let mut acc = 0.0f64;
    for v in values {
        acc += libm::pow(v.to_f64().abs(), p);
    }
    Ok(T::from_f64(libm::pow(acc / n, 1.0 / p)))
}

/// Gradient of `lp_pool` (for non-negative inputs, the only case the model
/// produces): dy/dh_j = (mean h^p)^((1-p)/p) * h_j^(p-1) / n.
pub fn lp_pool_backward<T: Real>(values: &[T], p: f64, d_y: T) -> Result<Vec<T>> {
    if p < 2.0 {
        return Err(CoreError::Config(format!("lp pool exponent must be >= 2, got {p}")));
    }
    let n = values.len() as f64;
    let mut mean_pow = 0.0f64;
    for v in values {
        mean_pow += libm::pow(v.to_f64().abs(), p);
    }
    mean_pow /= n;
    let dy = d_y.to_f64();
    let mut out = vec![T::ZERO; values.len()];
    if mean_pow == 0.0 {
        return Ok(out); // all-zero channel: subgradient 0 everywhere
    }
    let outer = libm::pow(mean_pow, (1.0 - p) / p);
    for (o, v) in out.iter_mut().zip(values.iter()) {
        let h = v.to_f64().abs();
        *o = T::from_f64(dy * outer * libm::pow(h, p - 1.0) / n);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_passes_through() {
        let values = [0.37f64; 25];
        let y = smoothmax_pool(&values, 8.0).unwrap();
        assert!((y - 0.37).abs() < 1e-12);
    }

    #[test]
    fn binary_field_matches_closed_form() {
        // {0, 1} at alpha 8: e^8 / (1 + e^8)
        let y = smoothmax_pool(&[0.0f64, 1.0], 8.0).unwrap();
        let expected = libm::exp(8.0) / (1.0 + libm::exp(8.0));
        assert!((y - expected).abs() < 1e-12);
        assert!((y - 0.999665).abs() < 1e-6);
    }

    #[test]
    fn huge_alpha_converges_to_max() {
        let values = [0.12f64, 0.73, 0.44, 0.731, 0.2];
        let y = smoothmax_pool(&values, 1e6).unwrap();
        assert!((y - 0.731).abs() < 1e-6);
    }

    #[test]
    fn max_pool_reports_first_argmax() {
        let (y, i) = max_pool(&[0.2f64, 0.8]).unwrap();
        assert_eq!(y, 0.8);
        assert_eq!(i, 1);
        let (_, i) = max_pool(&[0.5f64, 0.9, 0.9]).unwrap();
        assert_eq!(i, 1, "ties break to the first maximizer");
    }

    #[test]
    fn lp_pool_closed_forms() {
        let y = lp_pool(&[0.5f64, 0.5], 2.0).unwrap();
        assert!((y - 0.5).abs() < 1e-12);
        let y = lp_pool(&[0.0f64, 1.0], 2.0).unwrap();
        assert!((y - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn lp_pool_rejects_small_exponent() {
        assert!(matches!(lp_pool(&[0.5f64], 1.5), Err(CoreError::Config(_))));
    }

    #[test]
    fn empty_channel_is_an_argument_error() {
        assert!(matches!(smoothmax_pool::<f64>(&[], 8.0), Err(CoreError::Argument(_))));
        assert!(matches!(max_pool::<f64>(&[]), Err(CoreError::Argument(_))));
        assert!(matches!(lp_pool::<f64>(&[], 2.0), Err(CoreError::Argument(_))));
    }

    #[test]
    fn smoothmax_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_gradient, DEFAULT_EPS};
        use crate::tensor::{Shape, Tensor};
        let x = Tensor::from_vec(Shape::d1(5), alloc::vec![0.1, 0.9, 0.4, 0.2, 0.65]).unwrap();
        let grad = smoothmax_backward(x.data(), 8.0, 1.0).unwrap();
        let analytic = Tensor::from_vec(Shape::d1(5), grad).unwrap();
        check_gradient(
            |t| smoothmax_pool(t.data(), 8.0),
            &x,
            &analytic,
            DEFAULT_EPS,
            1e-6,
        )
        .unwrap();
    }

    #[test]
    fn lp_gradient_matches_finite_differences() {
        use crate::gradcheck::{check_gradient, DEFAULT_EPS};
        use crate::tensor::{Shape, Tensor};
        let x = Tensor::from_vec(Shape::d1(4), alloc::vec![0.1, 0.9, 0.4, 0.2]).unwrap();
        let grad = lp_pool_backward(x.data(), 3.0, 1.0).unwrap();
        let analytic = Tensor::from_vec(Shape::d1(4), grad).unwrap();
        check_gradient(|t| lp_pool(t.data(), 3.0), &x, &analytic, DEFAULT_EPS, 1e-6).unwrap();
    }
}
