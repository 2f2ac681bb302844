//! Acceptance suite: one test per release criterion, each printing a
//! `[PASS]` line with the measured numbers.
//!
//! Run with:
//!
//! ```text
//! cargo test -p insight --test acceptance -- --nocapture
//! ```

use std::time::Instant;

use insight::config::RunConfig;
use insight::formats::{checkpoint, ieb1, pgm};
use insight::report::write_report_json;
use insight::run::evaluate_split;
use insight::AppError;
use insight_core::bag::{BagOfPatches, Patch};
use insight_core::eval::{evaluate_dataset, EvalOptions};
use insight_core::gradcheck::{
    check_bag_loss_gradients, finite_difference_gradient, masking_margin, max_relative_error,
    unique_argmax, DEFAULT_ABS_TOL, DEFAULT_EPS, DEFAULT_REL_TOL,
};
use insight_core::loss::LossConfig;
use insight_core::mask::BinaryMask;
use insight_core::metrics::{
    auc, connected_components, dice, permutation_test, permutation_test_exact,
};
use insight_core::model::{ModelConfig, ModelParams, PoolingMode};
use insight_core::otsu::{intra_class_variance, otsu_threshold};
use insight_core::pool::{max_pool, smoothmax_pool};
use insight_core::rng::Rng;
use insight_core::synth::{generate_synthetic, SynthConfig};
use insight_core::tensor::{
    conv2d, conv2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward, sigmoid,
    sigmoid_backward, ConvLayer, Shape, Tensor,
};
use insight_core::train::{train, NullClock};

fn random_tensor(shape: Shape, rng: &mut Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_vec(shape, (0..shape.len()).map(|_| rng.normal() * scale).collect()).unwrap()
}

fn toy_config(pooling: PoolingMode, threshold: bool) -> ModelConfig {
    ModelConfig {
        embed_dim: 3,
        proj_dim: 2,
        hidden_dim: 3,
        num_labels: 2,
        otsu_bins: 64,
        pooling_mode: pooling,
        lp_p: 3.0,
        threshold_enabled: threshold,
        ..ModelConfig::default()
    }
}

fn toy_bag(seed: u64) -> BagOfPatches<f64> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut patch = |row: u32, col: u32| Patch {
        embedding: random_tensor(Shape::d3(3, 3, 3), &mut rng, 1.0),
        row,
        col,
    };
    BagOfPatches {
        bag_id: format!("toy_{seed}"),
        patches: vec![patch(0, 0), patch(0, 1)],
        labels: vec![1, 0],
        masks: None,
    }
}

/// Criterion 1: every differentiable primitive and the full bag loss match
/// central finite differences (double precision, eps 1e-5, rel err < 1e-4)
/// across at least 20 seeds.
#[test]
fn criterion_1_gradient_suite() {
    let started = Instant::now();
    let seeds = 20u64;

    for seed in 0..seeds {
        let mut rng = Rng::seed_from_u64(seed);

        // conv2d: input, kernel, and bias gradients.
        let input = random_tensor(Shape::d3(2, 5, 5), &mut rng, 1.0);
        let kernel = random_tensor(Shape::d4(2, 2, 3, 3), &mut rng, 0.5);
        let bias = random_tensor(Shape::d1(2), &mut rng, 0.2);
        let layer = ConvLayer::new(kernel.clone(), bias.clone()).unwrap();
        let d_out = Tensor::filled(Shape::d3(2, 5, 5), 1.0);
        let (d_in, d_k, d_b) = conv2d_backward(&input, &kernel, 1, &d_out).unwrap();
        let sum = |t: &Tensor<f64>| -> f64 { t.data().iter().sum() };
        let n_in =
            finite_difference_gradient(|x| Ok(sum(&conv2d(x, &layer)?)), &input, DEFAULT_EPS)
                .unwrap();
        let n_k = finite_difference_gradient(
            |k| {
                let l = ConvLayer::new(k.clone(), bias.clone()).unwrap();
                Ok(sum(&conv2d(&input, &l)?))
            },
            &kernel,
            DEFAULT_EPS,
        )
        .unwrap();
        let n_b = finite_difference_gradient(
            |b| {
                let l = ConvLayer::new(kernel.clone(), b.clone()).unwrap();
                Ok(sum(&conv2d(&input, &l)?))
            },
            &bias,
            DEFAULT_EPS,
        )
        .unwrap();
        for (analytic, numeric) in [(&d_in, &n_in), (&d_k, &n_k), (&d_b, &n_b)] {
            let err = max_relative_error(analytic.data(), numeric.data(), DEFAULT_ABS_TOL);
            assert!(err < DEFAULT_REL_TOL, "criterion 1: conv2d rel err {err:.2e} at seed {seed}");
        }

        // gelu and sigmoid, elementwise.
        let x = random_tensor(Shape::d1(16), &mut rng, 2.0);
        let ones = Tensor::filled(Shape::d1(16), 1.0);
        let a_gelu = gelu_backward(&x, &ones).unwrap();
        let n_gelu =
            finite_difference_gradient(|t| Ok(sum(&gelu(t)?)), &x, DEFAULT_EPS).unwrap();
        let err = max_relative_error(a_gelu.data(), n_gelu.data(), DEFAULT_ABS_TOL);
        assert!(err < 1e-5, "criterion 1: gelu rel err {err:.2e} at seed {seed}");
        let y = sigmoid(&x).unwrap();
        let a_sig = sigmoid_backward(&y, &ones).unwrap();
        let n_sig =
            finite_difference_gradient(|t| Ok(sum(&sigmoid(t)?)), &x, DEFAULT_EPS).unwrap();
        let err = max_relative_error(a_sig.data(), n_sig.data(), DEFAULT_ABS_TOL);
        assert!(err < 1e-5, "criterion 1: sigmoid rel err {err:.2e} at seed {seed}");

        // layer_norm: input, gain, and shift gradients under a weighted sum.
        let x = random_tensor(Shape::d3(4, 3, 3), &mut rng, 1.0);
        let gain = random_tensor(Shape::d1(4), &mut rng, 0.5);
        let shift = random_tensor(Shape::d1(4), &mut rng, 0.5);
        let weights = random_tensor(Shape::d3(4, 3, 3), &mut rng, 1.0);
        let weighted =
            |t: &Tensor<f64>| t.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum::<f64>();
        let (d_x, d_gain, d_shift) = layer_norm_backward(&x, &gain, &weights).unwrap();
        let n_x = finite_difference_gradient(
            |t| Ok(weighted(&layer_norm(t, &gain, &shift)?)),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        let n_gain = finite_difference_gradient(
            |g| Ok(weighted(&layer_norm(&x, g, &shift)?)),
            &gain,
            DEFAULT_EPS,
        )
        .unwrap();
        let n_shift = finite_difference_gradient(
            |s| Ok(weighted(&layer_norm(&x, &gain, s)?)),
            &shift,
            DEFAULT_EPS,
        )
        .unwrap();
        for (analytic, numeric) in [(&d_x, &n_x), (&d_gain, &n_gain), (&d_shift, &n_shift)] {
            let err = max_relative_error(analytic.data(), numeric.data(), DEFAULT_ABS_TOL);
            assert!(
                err < DEFAULT_REL_TOL,
                "criterion 1: layer_norm rel err {err:.2e} at seed {seed}"
            );
        }
    }

    // Full bag loss, all pooling modes, Otsu masking active. Seeds whose
    // heatmaps graze the threshold (or tie the argmax) are skipped: the
    // masked forward is discontinuous there by construction.
    let l_cfg = LossConfig { lambda_sd: 0.02, label_smoothing: 0.05, ..LossConfig::default() };
    let mut checked = 0u64;
    for pooling in [PoolingMode::SmoothMax, PoolingMode::Max, PoolingMode::Lp] {
        let m_cfg = toy_config(pooling, true);
        let mut done = 0;
        let mut seed = 0u64;
        while done < seeds {
            assert!(seed < 400, "criterion 1: ran out of margin-safe seeds");
            let bag = toy_bag(seed);
            let mut rng = Rng::seed_from_u64(10_000 + seed);
            let params = ModelParams::<f64>::init(&m_cfg, &mut rng).unwrap();
            seed += 1;
            if masking_margin(&bag, &params, &m_cfg).unwrap().is_some_and(|m| m < 1e-3) {
                continue;
            }
            if pooling == PoolingMode::Max && !unique_argmax(&bag, &params, &m_cfg).unwrap() {
                continue;
            }
            check_bag_loss_gradients(&bag, &params, &m_cfg, &l_cfg, DEFAULT_EPS, DEFAULT_REL_TOL)
                .unwrap_or_else(|e| panic!("criterion 1 ({pooling:?}): {e}"));
            done += 1;
            checked += 1;
        }
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 1 exceeded 2 min: {elapsed:?}");
    println!(
        "[PASS] criterion 1 — gradient suite: {seeds} seeds per primitive, \
         {checked} full-bag checks across 3 pooling modes, all within 1e-4 ({elapsed:?})"
    );
}

/// Criterion 2: SmoothMax boundedness, monotonicity in alpha, constant-field
/// identity, and convergence to max, on 1000 random fields each.
#[test]
fn criterion_2_pooling_properties() {
    let started = Instant::now();
    let mut rng = Rng::seed_from_u64(2);
    for round in 0..1000 {
        let n = 1 + rng.below(256);
        let values: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);

        // bounds
        let y = smoothmax_pool(&values, 8.0).unwrap();
        assert!(y >= lo - 1e-12 && y <= hi + 1e-12, "criterion 2: bounds at round {round}");

        // monotone in alpha
        let mut last = f64::NEG_INFINITY;
        for alpha in [1.0, 2.0, 4.0, 8.0, 16.0] {
            let v = smoothmax_pool(&values, alpha).unwrap();
            assert!(v >= last - 1e-9, "criterion 2: alpha monotonicity at round {round}");
            last = v;
        }

        // constant field
        let c = rng.next_f64();
        let constant = vec![c; n];
        let v = smoothmax_pool(&constant, 8.0).unwrap();
        assert!((v - c).abs() < 1e-12, "criterion 2: constant identity at round {round}");

        // alpha -> infinity gives the max
        let v = smoothmax_pool(&values, 1e6).unwrap();
        let (m, _) = max_pool(&values).unwrap();
        assert!((v - m).abs() < 1e-6, "criterion 2: max convergence at round {round}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 2 exceeded 30 s: {elapsed:?}");
    println!(
        "[PASS] criterion 2 — pooling properties: bounds, alpha-monotonicity, \
         constant identity, and max convergence on 1000 random fields ({elapsed:?})"
    );
}

/// Criterion 3: the histogram Otsu matches a brute-force minimizer over all
/// distinct-value splits, up to bin resolution, on 500 random inputs.
#[test]
fn criterion_3_otsu_oracle() {
    let started = Instant::now();
    let mut rng = Rng::seed_from_u64(3);
    let mut non_degenerate = 0;
    for round in 0..500 {
        let n = 2 + rng.below(999);
        let values: Vec<f64> = match round % 3 {
            0 => (0..n).map(|_| rng.next_f64()).collect(),
            1 => (0..n)
                .map(|_| {
                    if rng.next_f64() < 0.5 {
                        0.2 + 0.05 * rng.normal()
                    } else {
                        0.75 + 0.08 * rng.normal()
                    }
                })
                .collect(),
            _ => (0..n).map(|_| 0.5 + 0.01 * rng.normal()).collect(),
        };
        let r = otsu_threshold(&values, 256).unwrap();
        if r.degenerate {
            continue;
        }
        non_degenerate += 1;
        let got = intra_class_variance(&values, r.threshold);
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut best = f64::INFINITY;
        for w in sorted.windows(2) {
            if w[0] < w[1] {
                best = best.min(intra_class_variance(&values, (w[0] + w[1]) / 2.0));
            }
        }
        let span = sorted[sorted.len() - 1] - sorted[0];
        let slack = span * span / 256.0;
        assert!(
            got <= best + slack,
            "criterion 3: round {round}: histogram split {got:.6e} vs exact {best:.6e}"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 30, "criterion 3 exceeded 30 s: {elapsed:?}");
    println!(
        "[PASS] criterion 3 — Otsu oracle: histogram threshold within bin \
         resolution of the brute-force minimizer on 500 inputs \
         ({non_degenerate} non-degenerate) ({elapsed:?})"
    );
}

fn dice_oracle(pred: &[u8], gt: &[u8]) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == 1 && g == 1).count();
    let total =
        pred.iter().filter(|&&v| v == 1).count() + gt.iter().filter(|&&v| v == 1).count();
    if total == 0 {
        1.0
    } else {
        2.0 * inter as f64 / total as f64
    }
}

fn auc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let mut concordant = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            concordant += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    concordant / pairs
}

fn flood_fill_oracle(mask: &BinaryMask) -> Vec<Vec<usize>> {
    fn fill(mask: &BinaryMask, seen: &mut [bool], y: usize, x: usize, px: &mut Vec<usize>) {
        let idx = y * mask.width + x;
        if seen[idx] || mask.data[idx] == 0 {
            return;
        }
        seen[idx] = true;
        px.push(idx);
        if y > 0 {
            fill(mask, seen, y - 1, x, px);
        }
        if y + 1 < mask.height {
            fill(mask, seen, y + 1, x, px);
        }
        if x > 0 {
            fill(mask, seen, y, x - 1, px);
        }
        if x + 1 < mask.width {
            fill(mask, seen, y, x + 1, px);
        }
    }
    let mut seen = vec![false; mask.height * mask.width];
    let mut out = Vec::new();
    for y in 0..mask.height {
        for x in 0..mask.width {
            let mut px = Vec::new();
            fill(mask, &mut seen, y, x, &mut px);
            if !px.is_empty() {
                px.sort_unstable();
                out.push(px);
            }
        }
    }
    out
}

/// Criterion 4: dice, auc, and connected components match exhaustive
/// brute-force implementations on every instance up to size 10 plus 1000
/// random larger ones.
#[test]
fn criterion_4_metric_oracles() {
    let started = Instant::now();

    // Exhaustive dice on all mask pairs up to 10 pixels.
    let mut dice_cases = 0u64;
    for n in 1..=10usize {
        for p_bits in 0..(1u32 << n) {
            for g_bits in 0..(1u32 << n) {
                let p: Vec<u8> = (0..n).map(|i| ((p_bits >> i) & 1) as u8).collect();
                let g: Vec<u8> = (0..n).map(|i| ((g_bits >> i) & 1) as u8).collect();
                let expected = dice_oracle(&p, &g);
                let got = dice(
                    &BinaryMask::from_data(1, n, p).unwrap(),
                    &BinaryMask::from_data(1, n, g).unwrap(),
                )
                .unwrap();
                assert_eq!(got, expected, "criterion 4: dice n={n}");
                dice_cases += 1;
            }
        }
    }

    // Exhaustive auc over all label patterns up to size 10.
    let mut rng = Rng::seed_from_u64(4);
    let mut auc_cases = 0u64;
    for n in 2..=10usize {
        for label_bits in 1..(1u32 << n) - 1 {
            let labels: Vec<u8> = (0..n).map(|i| ((label_bits >> i) & 1) as u8).collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 4.0).floor() / 4.0).collect();
            let expected = auc_oracle(&scores, &labels);
            let got = auc(&scores, &labels).unwrap();
            assert!((got - expected).abs() < 1e-12, "criterion 4: auc n={n}");
            auc_cases += 1;
        }
    }

    // Exhaustive components on all 3x3 masks (512 <= every mask up to 9 px).
    for bits in 0..(1u32 << 9) {
        let data: Vec<u8> = (0..9).map(|i| ((bits >> i) & 1) as u8).collect();
        let mask = BinaryMask::from_data(3, 3, data).unwrap();
        let got: Vec<Vec<usize>> =
            connected_components(&mask).into_iter().map(|c| c.pixels).collect();
        assert_eq!(got, flood_fill_oracle(&mask), "criterion 4: components {bits:b}");
    }

    // 1000 random larger instances of each metric.
    for round in 0..1000 {
        let (h, w) = (2 + rng.below(18), 2 + rng.below(18));
        let p: Vec<u8> = (0..h * w).map(|_| (rng.next_f64() < 0.4) as u8).collect();
        let g: Vec<u8> = (0..h * w).map(|_| (rng.next_f64() < 0.4) as u8).collect();
        let pm = BinaryMask::from_data(h, w, p.clone()).unwrap();
        let gm = BinaryMask::from_data(h, w, g.clone()).unwrap();
        assert!((dice(&pm, &gm).unwrap() - dice_oracle(&p, &g)).abs() < 1e-12);
        let got: Vec<Vec<usize>> =
            connected_components(&pm).into_iter().map(|c| c.pixels).collect();
        assert_eq!(got, flood_fill_oracle(&pm), "criterion 4: components round {round}");

        let n = 2 + rng.below(60);
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 8.0).floor() / 8.0).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| (rng.next_f64() < 0.5) as u8).collect();
        if labels.iter().all(|&l| l == 0) {
            labels[0] = 1;
        }
        if labels.iter().all(|&l| l == 1) {
            labels[0] = 0;
        }
        assert!((auc(&scores, &labels).unwrap() - auc_oracle(&scores, &labels)).abs() < 1e-12);
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 60, "criterion 4 exceeded 1 min: {elapsed:?}");
    println!(
        "[PASS] criterion 4 — metric oracles: {dice_cases} exhaustive dice pairs, \
         {auc_cases} exhaustive auc patterns, 512 exhaustive component masks, \
         1000 random larger instances each ({elapsed:?})"
    );
}

/// Criterion 5: sampled permutation p-values track exact enumeration for
/// n <= 10, and null p-values are super-uniform.
#[test]
fn criterion_5_permutation_validity() {
    let started = Instant::now();
    let mut rng = Rng::seed_from_u64(5);

    let mut max_gap = 0.0f64;
    for n in 1..=10usize {
        for round in 0..5 {
            let diffs: Vec<f64> = (0..n).map(|_| rng.normal() * 0.4 + 0.1).collect();
            let exact = permutation_test_exact(&diffs).unwrap();
            let sampled = permutation_test(&diffs, 10_000, 500 + round).unwrap();
            let gap = (exact - sampled).abs();
            assert!(gap <= 0.02, "criterion 5: n={n} gap {gap:.4}");
            max_gap = max_gap.max(gap);
        }
    }

    // Null super-uniformity: symmetric diffs, 200 trials.
    let trials = 200;
    let mut p_values = Vec::with_capacity(trials);
    for t in 0..trials {
        let diffs: Vec<f64> = (0..25).map(|_| rng.normal()).collect();
        p_values.push(permutation_test(&diffs, 400, 9000 + t as u64).unwrap());
    }
    for alpha in [0.05, 0.1, 0.25, 0.5] {
        let hits = p_values.iter().filter(|&&p| p <= alpha).count() as f64 / trials as f64;
        // One-sided 99.7% Monte-Carlo envelope around alpha.
        let tol = 3.0 * (alpha * (1.0 - alpha) / trials as f64).sqrt();
        assert!(
            hits <= alpha + tol,
            "criterion 5: null rejection rate {hits:.3} at alpha {alpha} (tol {tol:.3})"
        );
    }

    // Strongly positive diffs hit the p-value floor.
    let p = permutation_test(&[1.0; 20], 10_000, 77).unwrap();
    assert!(p <= 0.001, "criterion 5: all-positive diffs gave p = {p}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 120, "criterion 5 exceeded 2 min: {elapsed:?}");
    println!(
        "[PASS] criterion 5 — permutation validity: sampled vs exact gap <= {max_gap:.4} \
         (limit 0.02), null super-uniform over {trials} trials, floor p = {p:.4} ({elapsed:?})"
    );
}

/// Criterion 6: trained with bag labels only, the pinned default benchmark
/// reaches test AUC >= 0.90 and mean Dice >= 0.60; a null-signal control
/// stays at chance level.
#[test]
fn criterion_6_end_to_end_benchmark() {
    let started = Instant::now();
    let cfg = RunConfig::default();

    let data = generate_synthetic(&cfg.synth).unwrap();
    let trained =
        train::<f32>(&cfg.model, &cfg.train, &cfg.loss, &data.train, &data.val, &NullClock)
            .unwrap();
    let report =
        evaluate_dataset(&trained.params, &cfg.model, &data.test, &cfg.eval, None).unwrap();
    let auc_value = report.auc[0].expect("test split has both classes");
    let dice_value = report.dice_mean.expect("positive bags carry masks");
    assert!(auc_value >= 0.90, "criterion 6: test AUC {auc_value:.4} < 0.90");
    assert!(dice_value >= 0.60, "criterion 6: mean test Dice {dice_value:.4} < 0.60");

    // Null-signal control: no learnable signal means chance-level AUC.
    let null_synth = SynthConfig {
        signal_strength: 0.0,
        train_bags: 40,
        val_bags: 20,
        test_bags: 200,
        ..cfg.synth.clone()
    };
    let null_data = generate_synthetic(&null_synth).unwrap();
    let null_train = insight_core::optim::TrainConfig {
        max_epochs: 12,
        patience: 12,
        selection_metric: insight_core::optim::SelectionMetric::ValidationAuc,
        ..cfg.train.clone()
    };
    let null_model = train::<f32>(
        &cfg.model,
        &null_train,
        &cfg.loss,
        &null_data.train,
        &null_data.val,
        &NullClock,
    )
    .unwrap();
    let null_report =
        evaluate_dataset(&null_model.params, &cfg.model, &null_data.test, &cfg.eval, None)
            .unwrap();
    let null_auc = null_report.auc[0].unwrap();
    assert!(
        (null_auc - 0.5).abs() <= 0.1,
        "criterion 6: null-signal AUC {null_auc:.4} outside 0.5 +/- 0.1"
    );

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs() < 600, "criterion 6 exceeded 10 min: {elapsed:?}");
    println!(
        "[PASS] criterion 6 — end-to-end benchmark: test AUC {auc_value:.4} (>= 0.90), \
         mean Dice {dice_value:.4} (>= 0.60), null-signal AUC {null_auc:.4} (in 0.5±0.1) \
         ({elapsed:?})"
    );
}

fn desk_train(seed: u64, max_epochs: usize) -> insight_core::optim::TrainConfig {
    insight_core::optim::TrainConfig {
        seed,
        max_epochs,
        patience: 8.min(max_epochs),
        ..RunConfig::default().train
    }
}

/// Criterion 7: context suppression plus SmoothMax beats the bare
/// max-pooling configuration on heatmap Dice, averaged over 3 seeds.
#[test]
fn criterion_7_ablation_direction() {
    let cfg = RunConfig::default();
    let data = generate_synthetic(&cfg.synth).unwrap();
    let loss = LossConfig { lambda_sd: 0.0, label_smoothing: 0.0, ..cfg.loss.clone() };

    let mut base_scores = Vec::new();
    let mut full_scores = Vec::new();
    for seed in [1u64, 2, 3] {
        for (cs, sm) in [(false, false), (true, true)] {
            let model_cfg = ModelConfig {
                context_enabled: cs,
                pooling_mode: if sm { PoolingMode::SmoothMax } else { PoolingMode::Max },
                ..cfg.model.clone()
            };
            let trained = train::<f32>(
                &model_cfg,
                &desk_train(seed, 20),
                &loss,
                &data.train,
                &data.val,
                &NullClock,
            )
            .unwrap();
            let report =
                evaluate_dataset(&trained.params, &model_cfg, &data.test, &cfg.eval, None)
                    .unwrap();
            let d = report.dice_mean.unwrap();
            if cs {
                full_scores.push(d);
            } else {
                base_scores.push(d);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let base = mean(&base_scores);
    let full = mean(&full_scores);
    assert!(
        full > base,
        "criterion 7: CS+SmoothMax Dice {full:.4} not greater than max-pool baseline {base:.4}"
    );
    println!(
        "[PASS] criterion 7 — ablation direction: CS+SmoothMax Dice {full:.4} > \
         no-CS/max-pool {base:.4} over 3 seeds ({base_scores:.3?} vs {full_scores:.3?})"
    );
}

/// Criterion 8: the built-in heatmap localizes better than the post-hoc
/// gradient saliency baseline, averaged over 3 seeds.
#[test]
fn criterion_8_builtin_vs_gradcam() {
    let cfg = RunConfig::default();
    let data = generate_synthetic(&cfg.synth).unwrap();
    let opts = EvalOptions { include_grad_cam: true, ..cfg.eval.clone() };

    let mut builtin = Vec::new();
    let mut gradcam = Vec::new();
    for seed in [1u64, 2, 3] {
        let trained = train::<f32>(
            &cfg.model,
            &desk_train(seed, 20),
            &cfg.loss,
            &data.train,
            &data.val,
            &NullClock,
        )
        .unwrap();
        let report =
            evaluate_dataset(&trained.params, &cfg.model, &data.test, &opts, None).unwrap();
        builtin.push(report.dice_mean.unwrap());
        gradcam.push(report.grad_cam_dice_mean.unwrap());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let b = mean(&builtin);
    let g = mean(&gradcam);
    assert!(
        b > g,
        "criterion 8: built-in Dice {b:.4} not greater than saliency baseline {g:.4}"
    );
    println!(
        "[PASS] criterion 8 — built-in vs post-hoc: built-in Dice {b:.4} > \
         gradient-saliency {g:.4} over 3 seeds ({builtin:.3?} vs {gradcam:.3?})"
    );
}

/// Criterion 9: identical seeds give byte-identical checkpoints and
/// reports; containers round-trip exactly and reject malformed input.
#[test]
fn criterion_9_determinism_and_formats() {
    let started = Instant::now();
    let synth = SynthConfig {
        train_bags: 8,
        val_bags: 4,
        test_bags: 6,
        embed_dim: 8,
        signal_channels: 3,
        ..SynthConfig::default()
    };
    let model_cfg = ModelConfig {
        embed_dim: 8,
        proj_dim: 4,
        hidden_dim: 6,
        num_labels: 1,
        ..ModelConfig::default()
    };
    let train_cfg = desk_train(4242, 4);
    let loss = LossConfig::default();

    // Byte-identical generation, checkpoints, and reports for equal seeds.
    let data_a = generate_synthetic(&synth).unwrap();
    let data_b = generate_synthetic(&synth).unwrap();
    assert_eq!(data_a, data_b, "criterion 9: generation must be deterministic");
    let run = |data: &insight_core::synth::SynthDataset| {
        let trained =
            train::<f32>(&model_cfg, &train_cfg, &loss, &data.train, &data.val, &NullClock)
                .unwrap();
        let report = evaluate_split(
            &trained.params,
            &model_cfg,
            &data.test,
            &EvalOptions::default(),
            None,
            3,
        )
        .unwrap();
        (checkpoint::encode_checkpoint(&model_cfg, &trained.params), report)
    };
    let (bytes_a, report_a) = run(&data_a);
    let (bytes_b, report_b) = run(&data_b);
    assert_eq!(bytes_a, bytes_b, "criterion 9: checkpoints must be byte-identical");
    assert_eq!(
        serde_json::to_vec(&report_a).unwrap(),
        serde_json::to_vec(&report_b).unwrap(),
        "criterion 9: reports must be byte-identical"
    );

    let dir = std::env::temp_dir().join(format!("insight-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();

    // IEB1 round-trip and rejection.
    let bag = &data_a.train[0];
    let bag_path = dir.join("bag.ieb");
    ieb1::write_bag(&bag_path, bag).unwrap();
    assert_eq!(&ieb1::read_bag(&bag_path).unwrap(), bag, "criterion 9: IEB1 round-trip");
    let bytes = ieb1::encode_bag(bag).unwrap();
    std::fs::write(&bag_path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(
        matches!(ieb1::read_bag(&bag_path), Err(AppError::Format { .. })),
        "criterion 9: truncated IEB1 must be rejected"
    );

    // PGM round-trip and rejection.
    let mask = &bag.masks.as_ref().unwrap().planes[0];
    let mask_path = dir.join("mask.pgm");
    pgm::write_mask(&mask_path, mask).unwrap();
    assert_eq!(&pgm::read_mask(&mask_path).unwrap(), mask, "criterion 9: PGM round-trip");
    std::fs::write(&mask_path, b"P5\n3 3\n255\n\x00\x01").unwrap();
    assert!(
        matches!(pgm::read_mask(&mask_path), Err(AppError::Format { .. })),
        "criterion 9: short PGM must be rejected"
    );

    // Checkpoint round-trip, re-encode equality, and rejection.
    let ckpt_path = dir.join("model.insm");
    std::fs::write(&ckpt_path, &bytes_a).unwrap();
    let (cfg2, params2) = checkpoint::load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(
        checkpoint::encode_checkpoint(&cfg2, &params2),
        bytes_a,
        "criterion 9: checkpoint round-trip"
    );
    let mut corrupt = bytes_a.clone();
    corrupt[0] = b'?';
    std::fs::write(&ckpt_path, &corrupt).unwrap();
    assert!(
        matches!(checkpoint::load_checkpoint(&ckpt_path), Err(AppError::Format { .. })),
        "criterion 9: corrupt checkpoint must be rejected"
    );

    // Report JSON round-trips through its schema.
    let report_path = dir.join("report.json");
    write_report_json(&report_path, &report_a).unwrap();
    let back = insight::report::read_report_json(&report_path).unwrap();
    assert_eq!(back, report_a, "criterion 9: report schema round-trip");

    println!(
        "[PASS] criterion 9 — determinism and formats: byte-identical checkpoints \
         and reports, exact IEB1/PGM/checkpoint round-trips, malformed inputs \
         rejected ({:?})",
        started.elapsed()
    );
}
