//! AdamW: Adam with decoupled weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::model::ModelParams;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SelectionMetric {
    ValidationDice,
    ValidationAuc,
}

/// Optimizer and loop hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    /// Bags whose gradients are averaged into one optimizer step.
    pub grad_accumulation: usize,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 50,
            patience: 8,
            grad_accumulation: 1,
            selection_metric: SelectionMetric::ValidationDice,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(CoreError::Config("learning_rate must be > 0".into()));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::Config("max_epochs must be >= 1".into()));
        }
        if self.patience > self.max_epochs {
            return Err(CoreError::Config(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.grad_accumulation == 0 {
            return Err(CoreError::Config("grad_accumulation must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(CoreError::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter tensor plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let mut m = Vec::new();
        params.for_each(&mut |_, pair| m.push(Tensor::zeros(pair.value.shape())));
        let v = m.clone();
        AdamW { m, v, step: 0 }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update from the gradients currently held in `params`.
    ///
    /// Decay is decoupled: w <- w - lr*wd*w happens independently of the
    /// adaptive update. A non-finite gradient aborts with the step index.
    pub fn step(&mut self, params: &mut ModelParams<T>, cfg: &TrainConfig) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let lr = T::from_f64(cfg.learning_rate);
        let wd = T::from_f64(cfg.weight_decay);
        let b1 = T::from_f64(cfg.beta1);
        let b2 = T::from_f64(cfg.beta2);
        let eps = T::from_f64(cfg.adam_eps);
        let bias1 = T::from_f64(1.0 - libm::pow(cfg.beta1, t as f64));
        let bias2 = T::from_f64(1.0 - libm::pow(cfg.beta2, t as f64));

        let mut idx = 0;
        let mut failure: Option<CoreError> = None;
        params.for_each_mut(&mut |name, pair| {
            if failure.is_some() {
                return;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            idx += 1;
            for i in 0..pair.value.len() {
                let g = pair.grad.data()[i];
                if !g.is_finite() {
                    failure = Some(CoreError::Training {
                        step: t,
                        message: format!("non-finite gradient in {name} at element {i}"),
                    });
                    return;
                }
                let w = &mut pair.value.data_mut()[i];
                // Decoupled decay.
                *w -= lr * wd * *w;
                let mi = b1 * m.data()[i] + (T::ONE - b1) * g;
                let vi = b2 * v.data()[i] + (T::ONE - b2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bias1;
                let v_hat = vi / bias2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}
