//! Central finite-difference gradient oracle.
//!
//! Runs in double precision only; it is the independent reference every
//! hand-written backward pass is checked against.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Default perturbation for gradient checks.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Maximum accepted relative error between analytic and numerical gradients.
pub const DEFAULT_REL_TOL: f64 = 1e-4;
/// Absolute tolerance used where both gradients are near zero.
pub const DEFAULT_ABS_TOL: f64 = 1e-8;

/// Central-difference estimate of the gradient of a scalar-valued function.
///
/// Evaluates `f` at `x ± eps·e_i` for every coordinate; errors if `f`
/// returns a non-finite value anywhere.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut grad = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(CoreError::Oracle(format!(
                "function value non-finite at coordinate {i}: f+ = {plus}, f- = {minus}"
            )));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * eps);
    }
    Ok(grad)
}

/// Worst relative error between an analytic gradient and the oracle.
///
/// A coordinate is judged by |a - n| <= abs_tol + rel_tol * max(|a|, |n|):
/// the reported error is the disagreement beyond the absolute allowance,
/// relative to the larger magnitude, so near-zero gradients are not
/// penalized for oracle noise below `abs_tol`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_tol: f64) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let excess = ((a - n).abs() - abs_tol).max(0.0);
        let scale = a.abs().max(n.abs());
        let err = if scale > 0.0 {
            excess / scale
        } else if excess > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Assert helper for tests: checks a sampled subset of coordinates of an
/// analytic gradient against the oracle.
pub fn check_gradient<F>(
    f: F,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    eps: f64,
    rel_tol: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let numeric = finite_difference_gradient(f, x, eps)?;
    let err = max_relative_error(analytic.data(), numeric.data(), DEFAULT_ABS_TOL);
    if err > rel_tol {
        let detail: Vec<(usize, f64, f64)> = analytic
            .data()
            .iter()
            .zip(numeric.data().iter())
            .enumerate()
            .filter(|(_, (a, n))| {
                let diff = (*a - *n).abs();
                let scale = a.abs().max(n.abs());
                (if scale < DEFAULT_ABS_TOL { diff } else { diff / scale }) > rel_tol
            })
            .map(|(i, (a, n))| (i, *a, *n))
            .take(4)
            .collect();
        return Err(CoreError::Oracle(format!(
            "gradient mismatch: max rel err {err:.3e} > {rel_tol:.1e}; first offenders {detail:?}"
        )));
    }
    Ok(err)
}

/// Evaluate the total bag loss at the given parameters.
pub fn bag_loss(
    bag: &crate::bag::BagOfPatches<f64>,
    params: &crate::model::ModelParams<f64>,
    m_cfg: &crate::model::ModelConfig,
    l_cfg: &crate::loss::LossConfig,
) -> Result<f64> {
    let pred = crate::model::forward_bag(bag, params, m_cfg)?;
    crate::loss::total_loss(&pred.y_hat, &pred.z, &bag.labels, l_cfg)
}

/// Compare the analytic parameter gradients of the full bag loss against
/// central finite differences, coordinate by coordinate, in double
/// precision. Returns the worst relative error observed.
pub fn check_bag_loss_gradients(
    bag: &crate::bag::BagOfPatches<f64>,
    params: &crate::model::ModelParams<f64>,
    m_cfg: &crate::model::ModelConfig,
    l_cfg: &crate::loss::LossConfig,
    eps: f64,
    rel_tol: f64,
) -> Result<f64> {
    use crate::model::{backward_bag, forward_bag_traced};

    let mut work = params.clone();
    work.zero_grad();
    let (pred, trace) = forward_bag_traced(bag, &work, m_cfg)?;
    let (_, d_y) = crate::loss::total_loss_grad(&pred.y_hat, &bag.labels, l_cfg)?;
    backward_bag(bag, &trace, &mut work, m_cfg, &d_y)?;
    let mut analytic: Vec<(alloc::string::String, Tensor<f64>)> = Vec::new();
    work.for_each(&mut |name, pair| {
        analytic.push((alloc::string::String::from(name), pair.grad.clone()))
    });

    let mut worst = 0.0f64;
    for (tensor_idx, (name, grad)) in analytic.iter().enumerate() {
        for elem in 0..grad.len() {
            let eval_at = |delta: f64| -> Result<f64> {
                let mut probe = params.clone();
                let mut i = 0;
                probe.for_each_mut(&mut |_, pair| {
                    if i == tensor_idx {
                        pair.value.data_mut()[elem] += delta;
                    }
                    i += 1;
                });
                bag_loss(bag, &probe, m_cfg, l_cfg)
            };
            let numeric = (eval_at(eps)? - eval_at(-eps)?) / (2.0 * eps);
            let a = grad.data()[elem];
            let err = max_relative_error(&[a], &[numeric], DEFAULT_ABS_TOL);
            if err > rel_tol {
                return Err(CoreError::Oracle(format!(
                    "{name}[{elem}]: analytic {a:.6e} vs numeric {numeric:.6e} (rel err {err:.2e})"
                )));
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Smallest distance between any covered heatmap value and its label's
/// Otsu threshold; `None` when thresholding never engaged. The masked
/// forward is discontinuous at the threshold, so finite-difference checks
/// should skip configurations where this margin is tiny.
pub fn masking_margin(
    bag: &crate::bag::BagOfPatches<f64>,
    params: &crate::model::ModelParams<f64>,
    m_cfg: &crate::model::ModelConfig,
) -> Result<Option<f64>> {
    let pred = crate::model::forward_bag(bag, params, m_cfg)?;
    let plane = pred.full_heatmap.height() * pred.full_heatmap.width();
    let mut margin = f64::INFINITY;
    let mut engaged = false;
    for c in 0..m_cfg.num_labels {
        let Some(otsu) = pred.thresholds[c] else { return Ok(None) };
        if otsu.degenerate {
            continue;
        }
        engaged = true;
        for (i, &v) in pred.full_heatmap.channel(c).iter().enumerate() {
            if pred.coverage.data[i % plane] != 0 {
                margin = margin.min((v - otsu.threshold).abs());
            }
        }
    }
    Ok(engaged.then_some(margin))
}

/// Whether every label channel has a strict maximizer after masking; max
/// pooling is only differentiable there.
pub fn unique_argmax(
    bag: &crate::bag::BagOfPatches<f64>,
    params: &crate::model::ModelParams<f64>,
    m_cfg: &crate::model::ModelConfig,
) -> Result<bool> {
    let pred = crate::model::forward_bag(bag, params, m_cfg)?;
    let plane = pred.full_heatmap.height() * pred.full_heatmap.width();
    for c in 0..m_cfg.num_labels {
        let mut values: Vec<f64> = pred
            .masked_heatmap
            .channel(c)
            .iter()
            .enumerate()
            .filter(|(i, _)| pred.coverage.data[i % plane] != 0)
            .map(|(_, &v)| v)
            .collect();
        values.sort_by(|a, b| b.partial_cmp(a).expect("finite heatmap"));
        if values.len() >= 2 && values[0] - values[1] <= 1e-6 {
            return Ok(false);
        }
    }
    Ok(true)
}
