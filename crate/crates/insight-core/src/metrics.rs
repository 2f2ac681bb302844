//! Segmentation and classification metrics plus the paired permutation test.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mask::BinaryMask;
use crate::rng::Rng;

/// Dice overlap 2|P∩G| / (|P| + |G|).
///
/// Two empty masks agree perfectly and score 1.0 by convention.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    if !pred.same_extents(gt) {
        return Err(CoreError::Dimension(format!(
            "dice extents {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        inter += (p != 0 && g != 0) as usize;
        total += (p != 0) as usize + (g != 0) as usize;
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Area under the ROC curve in the Mann-Whitney formulation:
/// (concordant + 0.5 ties) / (n_pos * n_neg), computed from average ranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CoreError::Dimension(format!(
            "auc got {} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CoreError::UndefinedMetric(format!(
            "auc needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(CoreError::NonFinite(format!("auc score {s}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks over tie groups, then sum the positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// One 4-connected foreground component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    /// Pixel count.
    pub area: usize,
    /// Inclusive bounding box (y0, x0, y1, x1).
    pub bbox: (usize, usize, usize, usize),
    /// Flat pixel indices, in discovery (row-major) order.
    pub pixels: Vec<usize>,
}

/// Label 4-connected components; components are reported in row-major order
/// of their first pixel.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.height, mask.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Component { area: 0, bbox: (usize::MAX, usize::MAX, 0, 0), pixels: Vec::new() };
        stack.push(start);
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            comp.area += 1;
            comp.pixels.push(idx);
            comp.bbox.0 = comp.bbox.0.min(y);
            comp.bbox.1 = comp.bbox.1.min(x);
            comp.bbox.2 = comp.bbox.2.max(y);
            comp.bbox.3 = comp.bbox.3.max(x);
            let mut visit = |ny: usize, nx: usize| {
                let nidx = ny * w + nx;
                if mask.data[nidx] != 0 && !seen[nidx] {
                    seen[nidx] = true;
                    stack.push(nidx);
                }
            };
            if y > 0 {
                visit(y - 1, x);
            }
            if y + 1 < h {
                visit(y + 1, x);
            }
            if x > 0 {
                visit(y, x - 1);
            }
            if x + 1 < w {
                visit(y, x + 1);
            }
        }
        comp.pixels.sort_unstable();
        out.push(comp);
    }
    out
}

/// A lesion-size bin; `hi == usize::MAX` marks the open upper stratum.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StratumBounds {
    pub name: String,
    /// Inclusive lower pixel-area bound.
    pub lo: usize,
    /// Exclusive upper pixel-area bound.
    pub hi: usize,
}

impl StratumBounds {
    pub fn contains(&self, area: usize) -> bool {
        area >= self.lo && area < self.hi
    }
}

/// Verify the bounds partition (0, inf): contiguous, starting at 1, ending open.
pub fn validate_strata(strata: &[StratumBounds]) -> Result<()> {
    if strata.is_empty() {
        return Err(CoreError::Config("strata must not be empty".into()));
    }
    if strata[0].lo > 1 {
        return Err(CoreError::Config("first stratum must start at area 1".into()));
    }
    for pair in strata.windows(2) {
        if pair[0].hi != pair[1].lo {
            return Err(CoreError::Config(format!(
                "strata {} and {} do not tile: {} != {}",
                pair[0].name, pair[1].name, pair[0].hi, pair[1].lo
            )));
        }
    }
    if strata.last().unwrap().hi != usize::MAX {
        return Err(CoreError::Config("last stratum must be open-ended".into()));
    }
    Ok(())
}

/// Default size bins, scaled analogues of small / moderate / large lesions
/// on the synthetic 56x56 grid.
pub fn default_strata() -> Vec<StratumBounds> {
    vec![
        StratumBounds { name: "small".into(), lo: 1, hi: 60 },
        StratumBounds { name: "moderate".into(), lo: 60, hi: 252 },
        StratumBounds { name: "large".into(), lo: 252, hi: usize::MAX },
    ]
}

/// Per-lesion Dice: prediction restricted to the lesion's dilated bounding
/// window against the lesion pixels themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionScore {
    /// Index of the component within its ground-truth plane.
    pub component: usize,
    pub area: usize,
    pub dice: f64,
}

/// Fraction of the bounding-box extent added on each side of the window.
pub const LESION_WINDOW_DILATION: f64 = 0.25;

/// Score every ground-truth lesion of one plane against a predicted mask.
///
/// Each lesion is evaluated inside its bounding box dilated by 25% per side,
/// so distant false positives do not drown small-lesion scores while nearby
/// ones still count.
pub fn per_lesion_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<Vec<LesionScore>> {
    if !pred.same_extents(gt) {
        return Err(CoreError::Dimension(format!(
            "per-lesion dice extents {}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let comps = connected_components(gt);
    let (h, w) = (gt.height, gt.width);
    let mut out = Vec::with_capacity(comps.len());
    for (ci, comp) in comps.iter().enumerate() {
        let (y0, x0, y1, x1) = comp.bbox;
        let pad_y = libm::ceil((y1 - y0 + 1) as f64 * LESION_WINDOW_DILATION) as usize;
        let pad_x = libm::ceil((x1 - x0 + 1) as f64 * LESION_WINDOW_DILATION) as usize;
        let wy0 = y0.saturating_sub(pad_y);
        let wx0 = x0.saturating_sub(pad_x);
        let wy1 = (y1 + pad_y).min(h - 1);
        let wx1 = (x1 + pad_x).min(w - 1);

        let mut inter = 0usize;
        let mut pred_area = 0usize;
        for y in wy0..=wy1 {
            for x in wx0..=wx1 {
                let idx = y * w + x;
                if pred.data[idx] != 0 {
                    pred_area += 1;
                    if comp.pixels.binary_search(&idx).is_ok() {
                        inter += 1;
                    }
                }
            }
        }
        let denom = pred_area + comp.area;
        let d = if denom == 0 { 1.0 } else { 2.0 * inter as f64 / denom as f64 };
        out.push(LesionScore { component: ci, area: comp.area, dice: d });
    }
    Ok(out)
}

/// Paired one-tailed permutation test via sign flips.
///
/// Tests whether the mean of `diffs` is positive:
/// p = (1 + #{permuted mean at or above the observed mean}) / (1 + iterations).
/// The +1 floors the p-value away from zero.
pub fn permutation_test(diffs: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if diffs.is_empty() {
        return Err(CoreError::Argument("permutation test needs at least one pair".into()));
    }
    if iterations == 0 {
        return Err(CoreError::Argument("permutation test needs at least one iteration".into()));
    }
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    let mut rng = Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..iterations {
        let mut sum = 0.0;
        for &d in diffs {
            if rng.next_u64() & 1 == 0 {
                sum += d;
            } else {
                sum -= d;
            }
        }
        if sum / n >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + iterations) as f64)
}

/// Exact version of [`permutation_test`] enumerating all 2^n sign patterns;
/// usable for n <= ~20. p = #{pattern mean >= observed} / 2^n.
pub fn permutation_test_exact(diffs: &[f64]) -> Result<f64> {
    if diffs.is_empty() {
        return Err(CoreError::Argument("permutation test needs at least one pair".into()));
    }
    if diffs.len() > 24 {
        return Err(CoreError::Argument(format!(
            "exact enumeration of 2^{} sign patterns is infeasible",
            diffs.len()
        )));
    }
    let n = diffs.len();
    let observed: f64 = diffs.iter().sum::<f64>() / n as f64;
    let mut hits = 0usize;
    for pattern in 0..(1usize << n) {
        let mut sum = 0.0;
        for (i, &d) in diffs.iter().enumerate() {
            if pattern & (1 << i) == 0 {
                sum += d;
            } else {
                sum -= d;
            }
        }
        if sum / n as f64 >= observed {
            hits += 1;
        }
    }
    Ok(hits as f64 / (1usize << n) as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &(y, x) in ones {
            m.set(y, x, true);
        }
        m
    }

    #[test]
    fn dice_basic_cases() {
        let a = mask(2, 2, &[(0, 0), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = mask(2, 2, &[(0, 1), (1, 0)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = BinaryMask::zeros(2, 2);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        // |P| = |G| = 4, |P∩G| = 2 -> 0.5
        let p = mask(3, 3, &[(0, 0), (0, 1), (0, 2), (1, 0)]);
        let g = mask(3, 3, &[(0, 0), (0, 1), (2, 2), (2, 1)]);
        assert_eq!(dice(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn dice_extent_mismatch_errors() {
        let a = BinaryMask::zeros(2, 2);
        let b = BinaryMask::zeros(2, 3);
        assert!(matches!(dice(&a, &b), Err(CoreError::Dimension(_))));
    }

    #[test]
    fn auc_basic_cases() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap(), 0.5);
        let v = auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((v - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            auc(&[0.1, 0.9], &[1, 1]),
            Err(CoreError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn components_respect_4_connectivity() {
        assert!(connected_components(&BinaryMask::zeros(4, 4)).is_empty());
        // Two diagonal pixels do not touch under 4-connectivity.
        let m = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(connected_components(&m).len(), 2);
        let m = mask(3, 3, &[(0, 0), (0, 1), (1, 1)]);
        let comps = connected_components(&m);
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area, 3);
        assert_eq!(comps[0].bbox, (0, 0, 1, 1));
    }

    #[test]
    fn per_lesion_matches_whole_image_when_isolated() {
        // Single lesion, prediction empty outside the window: the windowed
        // score must equal whole-image Dice.
        let gt = mask(8, 8, &[(3, 3), (3, 4), (4, 3), (4, 4)]);
        let pred = mask(8, 8, &[(3, 3), (3, 4)]);
        let scores = per_lesion_dice(&pred, &gt).unwrap();
        assert_eq!(scores.len(), 1);
        let whole = dice(&pred, &gt).unwrap();
        assert!((scores[0].dice - whole).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_scores_one_per_lesion() {
        let gt = mask(8, 8, &[(1, 1), (1, 2), (6, 6)]);
        let scores = per_lesion_dice(&gt, &gt).unwrap();
        assert_eq!(scores.len(), 2);
        for s in scores {
            assert_eq!(s.dice, 1.0);
        }
    }

    #[test]
    fn permutation_all_zero_diffs_gives_p_one() {
        let p = permutation_test(&[0.0; 8], 1000, 42).unwrap();
        assert_eq!(p, 1.0);
    }

    #[test]
    fn permutation_strong_positive_diffs_is_significant() {
        let diffs = [1.0f64; 20];
        let p = permutation_test(&diffs, 10_000, 7).unwrap();
        assert!(p <= 0.001, "p = {p}");
    }

    #[test]
    fn sampled_p_tracks_exact_enumeration() {
        let diffs = [0.3, -0.1, 0.25, 0.4, -0.05, 0.2, 0.1, -0.2];
        let exact = permutation_test_exact(&diffs).unwrap();
        let sampled = permutation_test(&diffs, 10_000, 11).unwrap();
        assert!((exact - sampled).abs() < 0.02, "exact {exact} vs sampled {sampled}");
    }

    #[test]
    fn strata_validation() {
        assert!(validate_strata(&default_strata()).is_ok());
        let broken = vec![StratumBounds { name: "only".into(), lo: 1, hi: 100 }];
        assert!(validate_strata(&broken).is_err());
    }
}
