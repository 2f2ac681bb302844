//! Dataset-level evaluation: classification AUC, heatmap Dice against
//! ground-truth masks, lesion-size-stratified scoring, and paired
//! permutation tests against a comparator report.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bag::BagOfPatches;
use crate::error::{CoreError, Result};
use crate::mask::BinaryMask;
use crate::metrics::{
    auc, dice, mean_std, per_lesion_dice, permutation_test, validate_strata, StratumBounds,
};
use crate::model::{forward_bag, ModelConfig, ModelParams};
use crate::optim::SelectionMetric;
use crate::otsu::otsu_threshold;
use crate::real::Real;
use crate::saliency::grad_cam;

/// How a real-valued heatmap channel becomes a binary mask.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Binarization {
    /// Otsu threshold over the covered cells; a degenerate (constant)
    /// channel keeps everything.
    Otsu,
    /// Fixed threshold: keep strictly greater values.
    Fixed(f64),
}

/// Binarize one heatmap channel. Cells outside `coverage` (when given) are
/// background and are excluded from the threshold estimate.
pub fn binarize_heatmap<T: Real>(
    channel: &[T],
    height: usize,
    width: usize,
    coverage: Option<&BinaryMask>,
    method: Binarization,
    otsu_bins: usize,
) -> Result<BinaryMask> {
    if channel.len() != height * width {
        return Err(CoreError::Dimension(format!(
            "channel of {} values does not match {height}x{width}",
            channel.len()
        )));
    }
    let covered = |i: usize| coverage.map_or(true, |c| c.data[i] != 0);
    let mut out = BinaryMask::zeros(height, width);
    match method {
        Binarization::Fixed(t) => {
            let t = T::from_f64(t);
            for i in 0..channel.len() {
                if covered(i) && channel[i] > t {
                    out.data[i] = 1;
                }
            }
        }
        Binarization::Otsu => {
            let values: Vec<T> =
                (0..channel.len()).filter(|&i| covered(i)).map(|i| channel[i]).collect();
            if values.is_empty() {
                return Ok(out);
            }
            let r = otsu_threshold(&values, otsu_bins)?;
            for i in 0..channel.len() {
                if covered(i) && (r.degenerate || channel[i] > r.threshold) {
                    out.data[i] = 1;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalOptions {
    pub binarization: Binarization,
    pub strata: Vec<StratumBounds>,
    pub permutation_iterations: usize,
    pub permutation_seed: u64,
    /// Also score the post-hoc gradient saliency baseline.
    pub include_grad_cam: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            binarization: Binarization::Otsu,
            strata: crate::metrics::default_strata(),
            permutation_iterations: 10_000,
            permutation_seed: 0,
            include_grad_cam: false,
        }
    }
}

/// Per-bag evaluation row.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BagEval {
    pub bag_id: String,
    pub labels: Vec<u8>,
    pub y_hat: Vec<f64>,
    /// Per label; present only where the ground-truth plane is non-empty.
    pub dice: Vec<Option<f64>>,
    /// Saliency-baseline Dice, same convention.
    pub grad_cam_dice: Vec<Option<f64>>,
}

/// Per-lesion evaluation row (the permutation-test pairing unit).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LesionEval {
    pub bag_id: String,
    pub label: usize,
    /// Component index within the ground-truth plane.
    pub component: usize,
    pub area: usize,
    pub stratum: String,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StratumSummary {
    pub name: String,
    pub lo: usize,
    pub hi: usize,
    pub lesion_count: usize,
    pub dice_mean: f64,
    pub dice_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PermutationSummary {
    /// One-tailed p for "this report beats the comparator" over all lesions.
    pub overall: f64,
    /// Per-stratum p-values for strata populated in both reports.
    pub per_stratum: Vec<(String, f64)>,
}

/// Full evaluation outcome; serializes to the documented JSON schema.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalReport {
    pub num_labels: usize,
    pub binarization: Binarization,
    pub bags: Vec<BagEval>,
    /// Per-label AUC; `None` when the split holds a single class.
    pub auc: Vec<Option<f64>>,
    /// Aggregate built-in heatmap Dice over non-empty ground-truth planes.
    pub dice_mean: Option<f64>,
    pub dice_std: Option<f64>,
    pub grad_cam_dice_mean: Option<f64>,
    pub grad_cam_dice_std: Option<f64>,
    pub lesions: Vec<LesionEval>,
    /// Populated strata only; empty strata are absent, not zero.
    pub strata: Vec<StratumSummary>,
    /// Present when a comparator report was supplied.
    pub p_values: Option<PermutationSummary>,
}

/// Validation-time scalar used for checkpoint selection.
pub fn validation_metric<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bags: &[BagOfPatches<T>],
    metric: SelectionMetric,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(CoreError::Argument("validation split is empty".into()));
    }
    match metric {
        SelectionMetric::ValidationAuc => {
            let mut scores = vec![Vec::with_capacity(bags.len()); cfg.num_labels];
            let mut labels = vec![Vec::with_capacity(bags.len()); cfg.num_labels];
            for bag in bags {
                let pred = forward_bag(bag, params, cfg)?;
                for c in 0..cfg.num_labels {
                    scores[c].push(pred.y_hat[c].to_f64());
                    labels[c].push(bag.labels[c]);
                }
            }
            let mut total = 0.0;
            let mut defined = 0usize;
            for c in 0..cfg.num_labels {
                match auc(&scores[c], &labels[c]) {
                    Ok(v) => {
                        total += v;
                        defined += 1;
                    }
                    Err(CoreError::UndefinedMetric(_)) => {}
                    Err(e) => return Err(e),
                }
            }
            if defined == 0 {
                return Err(CoreError::UndefinedMetric(
                    "no label has both classes in the validation split".into(),
                ));
            }
            Ok(total / defined as f64)
        }
        SelectionMetric::ValidationDice => {
            let mut scores = Vec::new();
            for bag in bags {
                let Some(masks) = &bag.masks else { continue };
                let pred = forward_bag(bag, params, cfg)?;
                let (h, w) = (pred.full_heatmap.height(), pred.full_heatmap.width());
                for c in 0..cfg.num_labels {
                    let gt = &masks.planes[c];
                    if gt.is_blank() {
                        continue;
                    }
                    let pm = binarize_heatmap(
                        pred.full_heatmap.channel(c),
                        h,
                        w,
                        Some(&pred.coverage),
                        Binarization::Otsu,
                        cfg.otsu_bins,
                    )?;
                    scores.push(dice(&pm, gt)?);
                }
            }
            if scores.is_empty() {
                return Err(CoreError::UndefinedMetric(
                    "validation split has no non-empty ground-truth plane".into(),
                ));
            }
            Ok(scores.iter().sum::<f64>() / scores.len() as f64)
        }
    }
}

fn stratum_of<'a>(strata: &'a [StratumBounds], area: usize) -> &'a StratumBounds {
    strata
        .iter()
        .find(|s| s.contains(area))
        .unwrap_or_else(|| strata.last().expect("validated strata"))
}

/// Evaluate a model over a dataset.
///
/// Deterministic and invariant to bag order: rows are sorted by bag id
/// before any aggregation. When `comparator` is given, per-lesion Dice
/// differences (this report minus the comparator) feed one-tailed
/// permutation tests overall and per stratum.
pub fn evaluate_dataset<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bags: &[BagOfPatches<T>],
    options: &EvalOptions,
    comparator: Option<&EvalReport>,
) -> Result<EvalReport> {
    if bags.is_empty() {
        return Err(CoreError::Argument("cannot evaluate an empty dataset".into()));
    }
    let mut rows = Vec::with_capacity(bags.len());
    let mut lesions = Vec::new();
    for bag in bags {
        let (row, mut bag_lesions) = evaluate_bag(params, cfg, bag, options)?;
        rows.push(row);
        lesions.append(&mut bag_lesions);
    }
    assemble_report(cfg.num_labels, rows, lesions, options, comparator)
}

/// Score one bag: prediction, per-label Dice when ground truth exists, and
/// per-lesion rows. Safe to run bag-parallel with a read-only parameter
/// snapshot; feed the results to [`assemble_report`].
pub fn evaluate_bag<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    bag: &BagOfPatches<T>,
    options: &EvalOptions,
) -> Result<(BagEval, Vec<LesionEval>)> {
    let pred = forward_bag(bag, params, cfg)?;
    let (h, w) = (pred.full_heatmap.height(), pred.full_heatmap.width());
    let saliency = if options.include_grad_cam {
        Some(grad_cam(bag, params, cfg)?)
    } else {
        None
    };
    let mut lesions = Vec::new();
    let mut row = BagEval {
        bag_id: bag.bag_id.clone(),
        labels: bag.labels.clone(),
        y_hat: pred.y_hat.iter().map(|v| v.to_f64()).collect(),
        dice: vec![None; cfg.num_labels],
        grad_cam_dice: vec![None; cfg.num_labels],
    };
    if let Some(masks) = &bag.masks {
        for c in 0..cfg.num_labels {
            let gt = &masks.planes[c];
            if gt.is_blank() {
                continue;
            }
            let pm = binarize_heatmap(
                pred.full_heatmap.channel(c),
                h,
                w,
                Some(&pred.coverage),
                options.binarization,
                cfg.otsu_bins,
            )?;
            row.dice[c] = Some(dice(&pm, gt)?);
            for score in per_lesion_dice(&pm, gt)? {
                lesions.push(LesionEval {
                    bag_id: bag.bag_id.clone(),
                    label: c,
                    component: score.component,
                    area: score.area,
                    stratum: stratum_of(&options.strata, score.area).name.clone(),
                    dice: score.dice,
                });
            }
            if let Some(sal) = &saliency {
                let sm = binarize_heatmap(
                    sal.maps.channel(c),
                    h,
                    w,
                    Some(&pred.coverage),
                    options.binarization,
                    cfg.otsu_bins,
                )?;
                row.grad_cam_dice[c] = Some(dice(&sm, gt)?);
            }
        }
    }
    Ok((row, lesions))
}

/// Aggregate per-bag results into the final report. Rows are sorted by bag
/// id first, so the outcome does not depend on evaluation order.
pub fn assemble_report(
    num_labels: usize,
    mut rows: Vec<BagEval>,
    mut lesions: Vec<LesionEval>,
    options: &EvalOptions,
    comparator: Option<&EvalReport>,
) -> Result<EvalReport> {
    validate_strata(&options.strata)?;
    rows.sort_by(|a, b| a.bag_id.cmp(&b.bag_id));
    for pair in rows.windows(2) {
        if pair[0].bag_id == pair[1].bag_id {
            return Err(CoreError::Argument(format!("duplicate bag id {}", pair[0].bag_id)));
        }
    }
    lesions.sort_by(|a, b| {
        a.bag_id.cmp(&b.bag_id).then(a.label.cmp(&b.label)).then(a.component.cmp(&b.component))
    });
    let cfg_num_labels = num_labels;

    // Classification: per-label AUC over all bags.
    let mut auc_per_label = Vec::with_capacity(cfg_num_labels);
    for c in 0..cfg_num_labels {
        let scores: Vec<f64> = rows.iter().map(|r| r.y_hat[c]).collect();
        let labels: Vec<u8> = rows.iter().map(|r| r.labels[c]).collect();
        match auc(&scores, &labels) {
            Ok(v) => auc_per_label.push(Some(v)),
            Err(CoreError::UndefinedMetric(_)) => auc_per_label.push(None),
            Err(e) => return Err(e),
        }
    }

    let dice_values: Vec<f64> = rows.iter().flat_map(|r| r.dice.iter().flatten().copied()).collect();
    let (dice_mean, dice_std) = if dice_values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&dice_values);
        (Some(m), Some(s))
    };
    let cam_values: Vec<f64> =
        rows.iter().flat_map(|r| r.grad_cam_dice.iter().flatten().copied()).collect();
    let (grad_cam_dice_mean, grad_cam_dice_std) = if cam_values.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_std(&cam_values);
        (Some(m), Some(s))
    };

    let mut strata_rows = Vec::new();
    for bounds in &options.strata {
        let values: Vec<f64> =
            lesions.iter().filter(|l| l.stratum == bounds.name).map(|l| l.dice).collect();
        if values.is_empty() {
            continue;
        }
        let (m, s) = mean_std(&values);
        strata_rows.push(StratumSummary {
            name: bounds.name.clone(),
            lo: bounds.lo,
            hi: bounds.hi,
            lesion_count: values.len(),
            dice_mean: m,
            dice_std: s,
        });
    }

    let p_values = match comparator {
        None => None,
        Some(other) => Some(compare_reports(&lesions, other, options)?),
    };

    Ok(EvalReport {
        num_labels: cfg_num_labels,
        binarization: options.binarization,
        bags: rows,
        auc: auc_per_label,
        dice_mean,
        dice_std,
        grad_cam_dice_mean,
        grad_cam_dice_std,
        lesions,
        strata: strata_rows,
        p_values,
    })
}

/// Pair lesions with a comparator report by (bag, label, component) and run
/// the one-tailed sign-flip test on the Dice differences.
fn compare_reports(
    lesions: &[LesionEval],
    other: &EvalReport,
    options: &EvalOptions,
) -> Result<PermutationSummary> {
    if lesions.len() != other.lesions.len() {
        return Err(CoreError::Argument(format!(
            "comparator report has {} lesions, this evaluation has {}",
            other.lesions.len(),
            lesions.len()
        )));
    }
    let mut diffs = Vec::with_capacity(lesions.len());
    for (ours, theirs) in lesions.iter().zip(other.lesions.iter()) {
        if ours.bag_id != theirs.bag_id
            || ours.label != theirs.label
            || ours.component != theirs.component
        {
            return Err(CoreError::Argument(format!(
                "lesion mismatch: ({}, {}, {}) vs ({}, {}, {}); reports must come from the same dataset",
                ours.bag_id, ours.label, ours.component,
                theirs.bag_id, theirs.label, theirs.component
            )));
        }
        diffs.push((ours.stratum.clone(), ours.dice - theirs.dice));
    }
    let all: Vec<f64> = diffs.iter().map(|(_, d)| *d).collect();
    let overall = permutation_test(&all, options.permutation_iterations, options.permutation_seed)?;
    let mut per_stratum = Vec::new();
    for bounds in &options.strata {
        let subset: Vec<f64> =
            diffs.iter().filter(|(s, _)| *s == bounds.name).map(|(_, d)| *d).collect();
        if subset.is_empty() {
            continue;
        }
        let p = permutation_test(
            &subset,
            options.permutation_iterations,
            options.permutation_seed.wrapping_add(1 + bounds.lo as u64),
        )?;
        per_stratum.push((bounds.name.clone(), p));
    }
    Ok(PermutationSummary { overall, per_stratum })
}
