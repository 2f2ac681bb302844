//! Command implementations behind the CLI subcommands.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use insight_core::bag::BagOfPatches;
use insight_core::eval::{
    assemble_report, evaluate_bag, Binarization, EvalOptions, EvalReport,
};
use insight_core::loss::LossConfig;
use insight_core::model::{forward_bag, ModelConfig, ModelParams, PoolingMode};
use insight_core::optim::SelectionMetric;
use insight_core::resample::bicubic_upsample;
use insight_core::synth::generate_synthetic;
use insight_core::train::{rank_grid_points, train, Clock, GridPoint, GridSpec, TrainedModel};

use crate::config::RunConfig;
use crate::dataset::{ensure_output_dir, load_split, read_manifest, write_dataset, Manifest};
use crate::error::{AppError, Result};
use crate::formats::{atomic_write, checkpoint, ieb1, pgm};
use crate::history::write_history;
use crate::report::{write_report_csv, write_report_json};

pub const CHECKPOINT_NAME: &str = "checkpoint.insm";
pub const HISTORY_NAME: &str = "history.jsonl";

/// Wall clock for epoch timings.
pub struct WallClock(Instant);

impl WallClock {
    pub fn start() -> Self {
        WallClock(Instant::now())
    }
}

impl Clock for WallClock {
    fn now_ms(&self) -> u64 {
        self.0.elapsed().as_millis() as u64
    }
}

/// Order-preserving parallel map over `items` with `jobs` workers.
fn parallel_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let collected: Mutex<Vec<(usize, R)>> = Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|scope| {
        for worker in 0..jobs {
            let collected = &collected;
            let f = &f;
            scope.spawn(move || {
                let mut local = Vec::new();
                let mut i = worker;
                while i < items.len() {
                    local.push((i, f(i, &items[i])));
                    i += jobs;
                }
                collected.lock().expect("worker panicked").extend(local);
            });
        }
    });
    let mut rows = collected.into_inner().expect("worker panicked");
    rows.sort_by_key(|(i, _)| *i);
    rows.into_iter().map(|(_, r)| r).collect()
}

/// Generate the synthetic dataset and write it out.
pub fn cmd_synth(cfg: &RunConfig, out: &Path, force: bool) -> Result<Manifest> {
    ensure_output_dir(out, force)?;
    let data = generate_synthetic(&cfg.synth)?;
    let manifest = write_dataset(out, &data)?;
    cfg.write_resolved(out)?;
    Ok(manifest)
}

fn load_train_val(
    cfg: &RunConfig,
    data: &Path,
) -> Result<(Vec<BagOfPatches<f32>>, Vec<BagOfPatches<f32>>)> {
    let manifest = read_manifest(data)?;
    if manifest.embed_dim != cfg.model.embed_dim || manifest.num_labels != cfg.model.num_labels {
        return Err(AppError::Usage(format!(
            "dataset carries {}-channel embeddings with {} labels; the model expects {} / {}",
            manifest.embed_dim, manifest.num_labels, cfg.model.embed_dim, cfg.model.num_labels
        )));
    }
    Ok((load_split(data, &manifest, "train")?, load_split(data, &manifest, "val")?))
}

fn has_usable_masks(bags: &[BagOfPatches<f32>]) -> bool {
    bags.iter().any(|b| {
        b.masks
            .as_ref()
            .is_some_and(|m| m.planes.iter().any(|p| !p.is_blank()))
    })
}

pub struct TrainOutputs {
    pub model: TrainedModel<f32>,
    pub resolved: RunConfig,
}

/// Train one model per the resolved config and write checkpoint, history,
/// and the resolved config.
pub fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let (train_bags, val_bags) = load_train_val(cfg, data)?;

    // Selection falls back to AUC when the validation split carries no
    // usable ground-truth masks (label-only datasets).
    let mut resolved = cfg.clone();
    if resolved.train.selection_metric == SelectionMetric::ValidationDice
        && !has_usable_masks(&val_bags)
    {
        resolved.train.selection_metric = SelectionMetric::ValidationAuc;
    }

    let clock = WallClock::start();
    let model = train::<f32>(
        &resolved.model,
        &resolved.train,
        &resolved.loss,
        &train_bags,
        &val_bags,
        &clock,
    )?;
    checkpoint::save_checkpoint(&out.join(CHECKPOINT_NAME), &model.config, &model.params)?;
    write_history(&out.join(HISTORY_NAME), &model.history)?;
    resolved.write_resolved(out)?;
    Ok(TrainOutputs { model, resolved })
}

pub struct GridOutputs {
    pub leaderboard: Vec<GridPoint>,
    pub best: TrainedModel<f32>,
    pub resolved: RunConfig,
}

/// Hyperparameter grid search; each point trains independently (optionally
/// in parallel), the leaderboard is written, and the winning configuration
/// becomes the resolved config whose checkpoint is saved.
pub fn cmd_train_grid(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    spec: &GridSpec,
    epoch_budget: Option<usize>,
    jobs: usize,
) -> Result<GridOutputs> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let (train_bags, val_bags) = load_train_val(cfg, data)?;

    let mut base = cfg.clone();
    if base.train.selection_metric == SelectionMetric::ValidationDice
        && !has_usable_masks(&val_bags)
    {
        base.train.selection_metric = SelectionMetric::ValidationAuc;
    }

    let points = spec.points();
    let outcomes = parallel_map(&points, jobs, |_, &(alpha, lr, lambda)| {
        let model_cfg = ModelConfig { alpha, ..base.model.clone() };
        let mut train_cfg = insight_core::optim::TrainConfig {
            learning_rate: lr,
            ..base.train.clone()
        };
        if let Some(budget) = epoch_budget {
            train_cfg.max_epochs = budget;
            train_cfg.patience = train_cfg.patience.min(budget);
        }
        let loss_cfg = LossConfig { lambda_sd: lambda, ..base.loss.clone() };
        let clock = WallClock::start();
        train::<f32>(&model_cfg, &train_cfg, &loss_cfg, &train_bags, &val_bags, &clock).map(
            |outcome| {
                (
                    GridPoint {
                        alpha,
                        learning_rate: lr,
                        lambda_sd: lambda,
                        metric: outcome.best_metric,
                        best_epoch: outcome.best_epoch,
                    },
                    outcome,
                )
            },
        )
    });

    let mut pairs: Vec<(GridPoint, TrainedModel<f32>)> = Vec::with_capacity(points.len());
    for outcome in outcomes {
        pairs.push(outcome?);
    }
    let mut leaderboard: Vec<GridPoint> = pairs.iter().map(|(p, _)| p.clone()).collect();
    rank_grid_points(&mut leaderboard);
    let top = leaderboard[0].clone();
    let winner_idx = pairs
        .iter()
        .position(|(p, _)| *p == top)
        .expect("winner is one of the trained points");
    let best = pairs.swap_remove(winner_idx).1;

    // Leaderboard files.
    let mut json = serde_json::to_vec_pretty(&leaderboard)
        .map_err(|e| AppError::Data(format!("leaderboard serialization: {e}")))?;
    json.push(b'\n');
    atomic_write(&out.join("leaderboard.json"), &json)?;
    let mut csv = String::from("rank,alpha,learning_rate,lambda_sd,metric,best_epoch\n");
    for (i, p) in leaderboard.iter().enumerate() {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            i + 1,
            p.alpha,
            p.learning_rate,
            p.lambda_sd,
            p.metric,
            p.best_epoch
        ));
    }
    atomic_write(&out.join("leaderboard.csv"), csv.as_bytes())?;

    // The selected configuration becomes the run's resolved preset.
    let mut resolved = base.clone();
    resolved.model.alpha = top.alpha;
    resolved.train.learning_rate = top.learning_rate;
    resolved.loss.lambda_sd = top.lambda_sd;
    checkpoint::save_checkpoint(&out.join(CHECKPOINT_NAME), &best.config, &best.params)?;
    write_history(&out.join(HISTORY_NAME), &best.history)?;
    resolved.write_resolved(out)?;
    Ok(GridOutputs { leaderboard, best, resolved })
}

/// Evaluate a checkpoint over one dataset split, bag-parallel when asked.
pub fn evaluate_split(
    params: &ModelParams<f32>,
    model_cfg: &ModelConfig,
    bags: &[BagOfPatches<f32>],
    options: &EvalOptions,
    comparator: Option<&EvalReport>,
    jobs: usize,
) -> Result<EvalReport> {
    let scored = parallel_map(bags, jobs, |_, bag| evaluate_bag(params, model_cfg, bag, options));
    let mut rows = Vec::with_capacity(bags.len());
    let mut lesions = Vec::new();
    for item in scored {
        let (row, mut bag_lesions) = item?;
        rows.push(row);
        lesions.append(&mut bag_lesions);
    }
    Ok(assemble_report(model_cfg.num_labels, rows, lesions, options, comparator)?)
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub comparator: Option<PathBuf>,
    pub grad_cam: bool,
    pub fixed_threshold: Option<f64>,
    pub jobs: usize,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<EvalReport> {
    std::fs::create_dir_all(&args.out).map_err(|e| AppError::io(&args.out, e))?;
    let (model_cfg, params) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let manifest = read_manifest(&args.data)?;
    let bags = load_split(&args.data, &manifest, &args.split)?;

    let mut options = cfg.eval.clone();
    options.include_grad_cam = options.include_grad_cam || args.grad_cam;
    if let Some(t) = args.fixed_threshold {
        options.binarization = Binarization::Fixed(t);
    }
    let comparator = match &args.comparator {
        Some(path) => Some(crate::report::read_report_json(path)?),
        None => None,
    };
    let report =
        evaluate_split(&params, &model_cfg, &bags, &options, comparator.as_ref(), args.jobs)?;
    write_report_json(&args.out.join("report.json"), &report)?;
    write_report_csv(&args.out.join("report.csv"), &report)?;
    let mut resolved = cfg.clone();
    resolved.eval = options;
    resolved.write_resolved(&args.out)?;
    Ok(report)
}

/// Round half away from zero onto the 8-bit range.
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub struct HeatmapArgs {
    pub checkpoint: PathBuf,
    pub bag: PathBuf,
    pub label: usize,
    pub out: PathBuf,
    pub upsample: usize,
    /// Export the unmasked fused heatmap instead of the thresholded one.
    pub raw: bool,
}

/// Export one label channel of a bag's heatmap as a PGM image.
pub fn cmd_heatmap(args: &HeatmapArgs) -> Result<(usize, usize)> {
    if args.upsample == 0 {
        return Err(AppError::Usage("--upsample must be >= 1".into()));
    }
    let (model_cfg, params) = checkpoint::load_checkpoint(&args.checkpoint)?;
    let bag = ieb1::read_bag(&args.bag)?;
    if args.label >= model_cfg.num_labels {
        return Err(AppError::Usage(format!(
            "label {} out of range: the model has {} labels",
            args.label, model_cfg.num_labels
        )));
    }
    let pred = forward_bag(&bag, &params, &model_cfg)?;
    let map = if args.raw { &pred.full_heatmap } else { &pred.masked_heatmap };
    let (h, w) = (map.height(), map.width());
    let field: Vec<f64> = map.channel(args.label).iter().map(|&v| v as f64).collect();
    let up = bicubic_upsample(&field, h, w, args.upsample);
    let (uh, uw) = (h * args.upsample, w * args.upsample);
    let pixels: Vec<u8> = up.iter().map(|&v| quantize(v)).collect();
    pgm::write_gray(&args.out, uw, uh, &pixels)?;
    Ok((uh, uw))
}

/// One ablation row: which switches are on and what the test split scored.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AblationRow {
    pub context_suppression: bool,
    pub smoothmax: bool,
    pub regularizer: bool,
    pub auc: Vec<Option<f64>>,
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
}

/// Train and evaluate the four switch combinations
/// (none, +CS, +CS+SM, +CS+SM+Rg); SM off means max pooling and Rg off
/// disables both spectral decoupling and label smoothing.
pub fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    std::fs::create_dir_all(out).map_err(|e| AppError::io(out, e))?;
    let (train_bags, val_bags) = load_train_val(cfg, data)?;
    let manifest = read_manifest(data)?;
    let test_bags = load_split(data, &manifest, "test")?;

    let mut base = cfg.clone();
    if base.train.selection_metric == SelectionMetric::ValidationDice
        && !has_usable_masks(&val_bags)
    {
        base.train.selection_metric = SelectionMetric::ValidationAuc;
    }

    let switches = [
        (false, false, false),
        (true, false, false),
        (true, true, false),
        (true, true, true),
    ];
    let rows = parallel_map(&switches, jobs, |_, &(cs, sm, rg)| -> Result<AblationRow> {
        let model_cfg = ModelConfig {
            context_enabled: cs,
            pooling_mode: if sm { PoolingMode::SmoothMax } else { PoolingMode::Max },
            ..base.model.clone()
        };
        let loss_cfg = if rg {
            base.loss.clone()
        } else {
            LossConfig { lambda_sd: 0.0, label_smoothing: 0.0, ..base.loss.clone() }
        };
        let clock = WallClock::start();
        let outcome =
            train::<f32>(&model_cfg, &base.train, &loss_cfg, &train_bags, &val_bags, &clock)?;
        let report = evaluate_split(
            &outcome.params,
            &model_cfg,
            &test_bags,
            &base.eval,
            None,
            1,
        )?;
        Ok(AblationRow {
            context_suppression: cs,
            smoothmax: sm,
            regularizer: rg,
            auc: report.auc.clone(),
            dice_mean: report.dice_mean,
            dice_std: report.dice_std,
        })
    });
    let rows: Vec<AblationRow> = rows.into_iter().collect::<Result<_>>()?;

    let fmt_auc = |row: &AblationRow| {
        row.auc
            .iter()
            .map(|a| a.map_or("-".to_string(), |v| format!("{v:.3}")))
            .collect::<Vec<_>>()
            .join(";")
    };
    let fmt_dice = |row: &AblationRow| match (row.dice_mean, row.dice_std) {
        (Some(m), Some(s)) => format!("{:.1}±{:.1}", m * 100.0, s * 100.0),
        _ => "-".to_string(),
    };

    let mut csv = String::from("cs,sm,rg,auc,dice_mean,dice_std\n");
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.context_suppression as u8,
            row.smoothmax as u8,
            row.regularizer as u8,
            fmt_auc(row),
            row.dice_mean.map(|v| v.to_string()).unwrap_or_default(),
            row.dice_std.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;

    let mut md = String::from("| CS | SM | Rg | AUC | Dice (%) |\n|---|---|---|---|---|\n");
    for row in &rows {
        let tick = |b: bool| if b { "x" } else { " " };
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            tick(row.context_suppression),
            tick(row.smoothmax),
            tick(row.regularizer),
            fmt_auc(row),
            fmt_dice(row),
        ));
    }
    atomic_write(&out.join("ablation.md"), md.as_bytes())?;
    base.write_resolved(out)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::quantize;

    #[test]
    fn quantization_rounds_half_away_from_zero() {
        assert_eq!(quantize(0.5), 128); // 127.5 rounds up
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(1.7), 255);
    }
}
