//! Property tests for the algebraic invariants of the pipeline.

use insight_core::metrics::{auc, connected_components, dice};
use insight_core::mask::BinaryMask;
use insight_core::model::{apply_mask, fuse, Heatmap};
use insight_core::otsu::{intra_class_variance, otsu_threshold};
use insight_core::pool::{lp_pool, max_pool, smoothmax_pool};
use insight_core::tensor::{conv2d, layer_norm, sigmoid, ConvLayer, Shape, Tensor};
use proptest::prelude::*;

fn field(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.0f64..1.0, 1..n)
}

proptest! {
    #[test]
    fn smoothmax_is_bounded_by_min_and_max(values in field(128), alpha in 0.1f64..64.0) {
        let y = smoothmax_pool(&values, alpha).unwrap();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12, "{lo} <= {y} <= {hi}");
    }

    #[test]
    fn smoothmax_is_nondecreasing_in_alpha(values in field(64)) {
        let mut last = f64::NEG_INFINITY;
        for alpha in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let y = smoothmax_pool(&values, alpha).unwrap();
            prop_assert!(y >= last - 1e-9, "alpha {alpha}: {y} < {last}");
            last = y;
        }
    }

    #[test]
    fn pooled_values_never_leave_the_channel_hull(values in field(64)) {
        let (m, _) = max_pool(&values).unwrap();
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert_eq!(m, hi);
        let lp = lp_pool(&values, 2.0).unwrap();
        prop_assert!(lp >= 0.0 && lp <= hi + 1e-12);
    }

    #[test]
    fn sigmoid_output_is_strictly_inside_unit_interval(x in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
        let t = Tensor::from_vec(Shape::d1(x.len()), x).unwrap();
        let y = sigmoid(&t).unwrap();
        for &v in y.data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn fusion_stays_strictly_inside_unit_interval(
        det in proptest::collection::vec(-30.0f64..30.0, 9),
        con in proptest::collection::vec(-30.0f64..30.0, 9),
    ) {
        let det = Heatmap::new(Tensor::from_vec(Shape::d3(1, 3, 3), det).unwrap()).unwrap();
        let con = Heatmap::new(Tensor::from_vec(Shape::d3(1, 3, 3), con).unwrap()).unwrap();
        let h = fuse(&det, Some(&con)).unwrap();
        for &v in h.values.data() {
            prop_assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn suppression_is_monotone_in_context(det in 0.01f64..30.0, con in -20.0f64..20.0, bump in 0.01f64..10.0) {
        // For positive detection scores, growing the context score can only
        // lower the fused value.
        let one = |d: f64, c: f64| {
            let det = Heatmap::new(Tensor::from_vec(Shape::d3(1, 1, 1), vec![d]).unwrap()).unwrap();
            let con = Heatmap::new(Tensor::from_vec(Shape::d3(1, 1, 1), vec![c]).unwrap()).unwrap();
            fuse(&det, Some(&con)).unwrap().values.data()[0]
        };
        prop_assert!(one(det, con + bump) <= one(det, con) + 1e-12);
    }

    #[test]
    fn otsu_threshold_is_optimal_among_boundaries(values in proptest::collection::vec(0.0f64..1.0, 2..300)) {
        let bins = 64usize;
        let r = otsu_threshold(&values, bins).unwrap();
        if !r.degenerate {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let best = intra_class_variance(&values, r.threshold);
            for j in 1..bins {
                let t = lo + (hi - lo) * j as f64 / bins as f64;
                prop_assert!(
                    best <= intra_class_variance(&values, t) + 1e-9,
                    "boundary {t} beats chosen {}", r.threshold
                );
            }
        }
    }

    #[test]
    fn conv_is_linear_in_input_and_kernel(
        input in proptest::collection::vec(-2.0f64..2.0, 18),
        kernel in proptest::collection::vec(-1.0f64..1.0, 18),
        scale in -3.0f64..3.0,
    ) {
        let x = Tensor::from_vec(Shape::d3(2, 3, 3), input).unwrap();
        let k = Tensor::from_vec(Shape::d4(1, 2, 3, 3), kernel).unwrap();
        let layer = ConvLayer::new(k.clone(), Tensor::zeros(Shape::d1(1))).unwrap();
        let direct = conv2d(&x, &layer).unwrap();

        let mut scaled = x.clone();
        scaled.scale(scale);
        let from_scaled_input = conv2d(&scaled, &layer).unwrap();

        let mut k2 = k.clone();
        k2.scale(scale);
        let scaled_layer = ConvLayer::new(k2, Tensor::zeros(Shape::d1(1))).unwrap();
        let from_scaled_kernel = conv2d(&x, &scaled_layer).unwrap();

        for ((a, b), c) in direct
            .data()
            .iter()
            .zip(from_scaled_input.data())
            .zip(from_scaled_kernel.data())
        {
            prop_assert!((a * scale - b).abs() < 1e-6, "input: {a} * {scale} != {b}");
            prop_assert!((a * scale - c).abs() < 1e-6, "kernel: {a} * {scale} != {c}");
        }
    }

    #[test]
    fn layer_norm_ignores_per_site_constant_shifts(
        x in proptest::collection::vec(-2.0f64..2.0, 12),
        offset in -5.0f64..5.0,
    ) {
        let t = Tensor::from_vec(Shape::d3(3, 2, 2), x).unwrap();
        let gain = Tensor::filled(Shape::d1(3), 1.0);
        let shift = Tensor::zeros(Shape::d1(3));
        let base = layer_norm(&t, &gain, &shift).unwrap();
        let mut moved = t.clone();
        for v in moved.data_mut() {
            *v += offset;
        }
        let shifted = layer_norm(&moved, &gain, &shift).unwrap();
        for (a, b) in base.data().iter().zip(shifted.data()) {
            prop_assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn apply_mask_zeroes_exactly_the_dominated_entries(
        values in proptest::collection::vec(0.0f64..1.0, 12),
        threshold in 0.0f64..1.0,
    ) {
        let h = Heatmap::new(Tensor::from_vec(Shape::d3(1, 3, 4), values.clone()).unwrap()).unwrap();
        let masked = apply_mask(&h, threshold);
        for (i, &v) in masked.values.data().iter().enumerate() {
            if values[i] > threshold {
                prop_assert_eq!(v, values[i]);
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn dice_is_symmetric_and_bounded(
        a in proptest::collection::vec(0u8..2, 25),
        b in proptest::collection::vec(0u8..2, 25),
    ) {
        let ma = BinaryMask::from_data(5, 5, a).unwrap();
        let mb = BinaryMask::from_data(5, 5, b).unwrap();
        let d1 = dice(&ma, &mb).unwrap();
        let d2 = dice(&mb, &ma).unwrap();
        prop_assert_eq!(d1, d2);
        prop_assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn auc_complement_symmetry(
        scores in proptest::collection::vec(0.0f64..1.0, 4..40),
        flip in proptest::collection::vec(0u8..2, 4..40),
    ) {
        let n = scores.len().min(flip.len());
        let scores = &scores[..n];
        let labels = &flip[..n];
        let pos = labels.iter().filter(|&&l| l == 1).count();
        prop_assume!(pos > 0 && pos < n);
        let a = auc(scores, labels).unwrap();
        // Inverting the scores inverts the ranking.
        let inverted: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
        let b = auc(&inverted, labels).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-9, "{a} + {b} != 1");
    }

    #[test]
    fn component_areas_sum_to_mask_area(bits in proptest::collection::vec(0u8..2, 64)) {
        let m = BinaryMask::from_data(8, 8, bits).unwrap();
        let comps = connected_components(&m);
        let total: usize = comps.iter().map(|c| c.area).sum();
        prop_assert_eq!(total, m.area());
    }
}
