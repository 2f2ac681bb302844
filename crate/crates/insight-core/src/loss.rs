//! Training objective: per-label binary cross-entropy plus an L2 penalty on
//! the bag logits (spectral decoupling), which counters gradient starvation
//! by discouraging any single feature from saturating the logit.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Probability clamp applied before logarithms and logits.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossConfig {
    /// Spectral-decoupling strength lambda; 0 disables the penalty.
    pub lambda_sd: f64,
    /// Target smoothing s in [0, 0.5): y <- y (1 - s) + s/2.
    pub label_smoothing: f64,
    /// Probability clamp for the cross-entropy terms.
    pub eps_clip: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_sd: 0.01, label_smoothing: 0.0, eps_clip: PROB_EPS }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sd < 0.0 {
            return Err(CoreError::Config(format!(
                "lambda_sd must be >= 0, got {}",
                self.lambda_sd
            )));
        }
        if !(0.0..0.5).contains(&self.label_smoothing) {
            return Err(CoreError::Config(format!(
                "label_smoothing must lie in [0, 0.5), got {}",
                self.label_smoothing
            )));
        }
        if self.eps_clip <= 0.0 || self.eps_clip >= 0.5 {
            return Err(CoreError::Config(format!(
                "eps_clip must lie in (0, 0.5), got {}",
                self.eps_clip
            )));
        }
        Ok(())
    }
}

fn smoothed_target(y: u8, s: f64) -> f64 {
    y as f64 * (1.0 - s) + s / 2.0
}

/// Mean over labels of -[y ln p + (1-y) ln(1-p)] with clamped probabilities
/// and optional label smoothing.
pub fn bce_loss<T: Real>(y_hat: &[T], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    if y_hat.len() != y.len() || y_hat.is_empty() {
        return Err(CoreError::Dimension(format!(
            "bce expects matching non-empty vectors, got {} predictions for {} targets",
            y_hat.len(),
            y.len()
        )));
    }
    let mut total = 0.0f64;
    for (p, &t) in y_hat.iter().zip(y.iter()) {
        let p = p.to_f64().clamp(cfg.eps_clip, 1.0 - cfg.eps_clip);
        let t = smoothed_target(t, cfg.label_smoothing);
        total -= t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p);
    }
    Ok(total / y.len() as f64)
}

/// Spectral decoupling: (lambda / 2) ||z||^2.
pub fn spectral_decoupling<T: Real>(z: &[T], lambda_sd: f64) -> f64 {
    let sq: f64 = z.iter().map(|v| v.to_f64() * v.to_f64()).sum();
    0.5 * lambda_sd * sq
}

/// Total objective: BCE + spectral decoupling.
pub fn total_loss<T: Real>(y_hat: &[T], z: &[T], y: &[u8], cfg: &LossConfig) -> Result<f64> {
    Ok(bce_loss(y_hat, y, cfg)? + spectral_decoupling(z, cfg.lambda_sd))
}

/// Total loss and its gradient with respect to the pooled probabilities.
///
/// The logits are recomputed as logit(clamp(y_hat, PROB_EPS)) — the same
/// definition the forward pass uses — so the gradient of the spectral term
/// is taken through that mapping. Clamped coordinates receive no gradient.
pub fn total_loss_grad<T: Real>(
    y_hat: &[T],
    y: &[u8],
    cfg: &LossConfig,
) -> Result<(f64, Vec<T>)> {
    cfg.validate()?;
    if y_hat.len() != y.len() || y_hat.is_empty() {
        return Err(CoreError::Dimension(format!(
            "loss gradient expects matching non-empty vectors, got {} predictions for {} targets",
            y_hat.len(),
            y.len()
        )));
    }
    let n = y.len() as f64;
    let mut loss = 0.0f64;
    let mut grad = vec![T::ZERO; y_hat.len()];
    for (i, (p_raw, &t_raw)) in y_hat.iter().zip(y.iter()).enumerate() {
        let p_raw = p_raw.to_f64();
        let t = smoothed_target(t_raw, cfg.label_smoothing);

        // Cross-entropy term.
        let p = p_raw.clamp(cfg.eps_clip, 1.0 - cfg.eps_clip);
        loss -= (t * libm::log(p) + (1.0 - t) * libm::log(1.0 - p)) / n;
        let mut g = 0.0f64;
        if p_raw > cfg.eps_clip && p_raw < 1.0 - cfg.eps_clip {
            g += (p - t) / (p * (1.0 - p)) / n;
        }

        // Spectral term through z = logit(clamp(p, PROB_EPS)).
        if cfg.lambda_sd > 0.0 {
            let q = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let z = libm::log(q / (1.0 - q));
            loss += 0.5 * cfg.lambda_sd * z * z;
            if p_raw > PROB_EPS && p_raw < 1.0 - PROB_EPS {
                g += cfg.lambda_sd * z / (q * (1.0 - q));
            }
        }
        grad[i] = T::from_f64(g);
    }
    Ok((loss, grad))
}
