//! Training loop with early stopping, plus the hyperparameter grid search.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bag::BagOfPatches;
use crate::error::{CoreError, Result};
use crate::eval::validation_metric;
use crate::loss::{total_loss_grad, LossConfig};
use crate::model::{backward_bag, forward_bag_traced, ModelConfig, ModelParams};
use crate::optim::{AdamW, TrainConfig};
use crate::real::Real;
use crate::rng::Rng;

/// Wall-clock source; lets the loop stay `no_std` while the host records
/// real timings.
pub trait Clock {
    fn now_ms(&self) -> u64;
}

/// Clock stub reporting zero; epoch durations come out as zero.
pub struct NullClock;

impl Clock for NullClock {
    fn now_ms(&self) -> u64 {
        0
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub wall_time_ms: u64,
    /// True on the epoch whose checkpoint was kept.
    pub selected: bool,
}

/// Result of a training run: the best checkpoint and the full history.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<T>,
    pub best_epoch: usize,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
}

/// Train from scratch; fully deterministic given the seed.
///
/// One bag per optimizer step (or `grad_accumulation` bags averaged), a
/// seeded shuffle per epoch, validation after every epoch, and early
/// stopping once `patience` consecutive epochs fail to improve the
/// selection metric. The returned checkpoint is always the best one seen.
pub fn train<T: Real>(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    train_bags: &[BagOfPatches<T>],
    val_bags: &[BagOfPatches<T>],
    clock: &dyn Clock,
) -> Result<TrainedModel<T>> {
    model_cfg.validate()?;
    train_cfg.validate()?;
    loss_cfg.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(CoreError::Argument("train and validation splits must be non-empty".into()));
    }
    for bag in train_bags.iter().chain(val_bags) {
        if bag.labels.len() != model_cfg.num_labels {
            return Err(CoreError::Dimension(format!(
                "bag {} carries {} labels, model expects {}",
                bag.bag_id,
                bag.labels.len(),
                model_cfg.num_labels
            )));
        }
    }

    let mut rng = Rng::seed_from_u64(train_cfg.seed);
    let mut params = ModelParams::<T>::init(model_cfg, &mut rng)?;
    let mut optimizer = AdamW::new(&params);
    let mut order: Vec<usize> = (0..train_bags.len()).collect();

    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut global_step = 0usize;

    for epoch in 1..=train_cfg.max_epochs {
        let t0 = clock.now_ms();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0f64;
        let mut pending = 0usize;
        params.zero_grad();
        for (k, &bag_idx) in order.iter().enumerate() {
            let bag = &train_bags[bag_idx];
            let (pred, trace) = forward_bag_traced(bag, &params, model_cfg)?;
            let (loss, d_y) = total_loss_grad(&pred.y_hat, &bag.labels, loss_cfg)?;
            if !loss.is_finite() {
                return Err(CoreError::Training {
                    step: global_step,
                    message: format!("loss diverged on bag {}", bag.bag_id),
                });
            }
            epoch_loss += loss;
            backward_bag(bag, &trace, &mut params, model_cfg, &d_y)?;
            pending += 1;
            global_step += 1;
            if pending == train_cfg.grad_accumulation || k + 1 == order.len() {
                if pending > 1 {
                    let scale = T::from_f64(1.0 / pending as f64);
                    params.for_each_mut(&mut |_, pair| pair.grad.scale(scale));
                }
                optimizer.step(&mut params, train_cfg)?;
                params.zero_grad();
                pending = 0;
            }
        }
        let train_loss = epoch_loss / order.len() as f64;
        let val_metric =
            validation_metric(&params, model_cfg, val_bags, train_cfg.selection_metric)?;
        let improved = best.as_ref().map_or(true, |(_, m, _)| val_metric > *m);
        if improved {
            best = Some((epoch, val_metric, params.clone()));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_metric,
            wall_time_ms: clock.now_ms().saturating_sub(t0),
            selected: false,
        });
        let best_epoch = best.as_ref().expect("set on first epoch").0;
        if epoch - best_epoch >= train_cfg.patience {
            break;
        }
    }

    let (best_epoch, best_metric, best_params) = best.expect("at least one epoch ran");
    history[best_epoch - 1].selected = true;
    Ok(TrainedModel {
        config: model_cfg.clone(),
        params: best_params,
        best_epoch,
        best_metric,
        history,
    })
}

/// Axes of the hyperparameter grid.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub learning_rates: Vec<f64>,
    pub lambdas: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            alphas: vec![4.0, 6.0, 8.0, 10.0],
            learning_rates: vec![5e-5, 1e-4, 3e-4],
            lambdas: vec![0.0, 0.01, 0.05],
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.learning_rates.is_empty() || self.lambdas.is_empty() {
            return Err(CoreError::Config("grid axes must be non-empty".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.alphas.len() * self.learning_rates.len() * self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All grid points in enumeration order (alpha-major).
    pub fn points(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &alpha in &self.alphas {
            for &lr in &self.learning_rates {
                for &lambda in &self.lambdas {
                    out.push((alpha, lr, lambda));
                }
            }
        }
        out
    }
}

/// One leaderboard row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridPoint {
    pub alpha: f64,
    pub learning_rate: f64,
    pub lambda_sd: f64,
    pub metric: f64,
    pub best_epoch: usize,
}

/// Ranking: highest metric first; ties prefer higher alpha, then lower
/// learning rate, then lower lambda.
pub fn rank_grid_points(points: &mut [GridPoint]) {
    points.sort_by(|a, b| {
        b.metric
            .partial_cmp(&a.metric)
            .expect("finite metrics")
            .then(b.alpha.partial_cmp(&a.alpha).expect("finite alpha"))
            .then(a.learning_rate.partial_cmp(&b.learning_rate).expect("finite lr"))
            .then(a.lambda_sd.partial_cmp(&b.lambda_sd).expect("finite lambda"))
    });
}

/// Grid-search outcome: the ranked leaderboard and the winning run.
#[derive(Debug, Clone)]
pub struct GridOutcome<T> {
    pub leaderboard: Vec<GridPoint>,
    pub best: TrainedModel<T>,
}

/// Train one model per grid point and rank them by validation metric.
///
/// `epoch_budget` optionally caps epochs per point (grid passes are usually
/// shorter than the final training run).
pub fn grid_search<T: Real>(
    spec: &GridSpec,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    train_bags: &[BagOfPatches<T>],
    val_bags: &[BagOfPatches<T>],
    epoch_budget: Option<usize>,
    clock: &dyn Clock,
) -> Result<GridOutcome<T>> {
    spec.validate()?;
    let mut leaderboard = Vec::with_capacity(spec.len());
    let mut best: Option<(GridPoint, TrainedModel<T>)> = None;
    for (alpha, lr, lambda) in spec.points() {
        let m_cfg = ModelConfig { alpha, ..model_cfg.clone() };
        let mut t_cfg = TrainConfig { learning_rate: lr, ..train_cfg.clone() };
        if let Some(budget) = epoch_budget {
            t_cfg.max_epochs = budget;
            t_cfg.patience = t_cfg.patience.min(budget);
        }
        let l_cfg = LossConfig { lambda_sd: lambda, ..loss_cfg.clone() };
        let outcome = train(&m_cfg, &t_cfg, &l_cfg, train_bags, val_bags, clock)?;
        let point = GridPoint {
            alpha,
            learning_rate: lr,
            lambda_sd: lambda,
            metric: outcome.best_metric,
            best_epoch: outcome.best_epoch,
        };
        let replace = match &best {
            None => true,
            Some((incumbent, _)) => {
                let mut pair = [incumbent.clone(), point.clone()];
                rank_grid_points(&mut pair);
                pair[0] == point
            }
        };
        if replace {
            best = Some((point.clone(), outcome));
        }
        leaderboard.push(point);
    }
    rank_grid_points(&mut leaderboard);
    Ok(GridOutcome { leaderboard, best: best.expect("non-empty grid").1 })
}
