//! Post-hoc gradient saliency (Grad-CAM style) over the projected feature
//! maps — the baseline the built-in heatmaps are compared against.

use alloc::vec;
use alloc::vec::Vec;

use crate::bag::BagOfPatches;
use crate::error::Result;
use crate::model::{
    backward_to_projection, project_bag, stitch, Heatmap, ModelConfig, ModelParams,
};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

/// Minimum spread below which a saliency map is reported as degenerate.
const FLAT_SPAN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyOutcome<T> {
    /// Per-label saliency over the stitched grid, min-max normalized to
    /// [0, 1] per label; zeros where uncovered or degenerate.
    pub maps: Heatmap<T>,
    /// True for labels whose raw saliency was constant (normalization
    /// impossible); those channels are emitted as zeros.
    pub degenerate: Vec<bool>,
}

/// Gradient-weighted channel saliency.
///
/// For each label: backpropagate the pooled probability to the projected
/// feature maps, average the gradients over all patches and sites into one
/// weight per channel, form ReLU(sum_k w_k P_k) per site, stitch, and
/// min-max normalize over covered cells.
pub fn grad_cam<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<SaliencyOutcome<T>> {
    let projected = project_bag(bag, params)?;
    let (ph, pw) = (
        projected[0].shape().dim(1),
        projected[0].shape().dim(2),
    );
    let n_sites = (bag.patches.len() * ph * pw) as f64;

    let mut label_maps: Vec<Tensor<T>> = Vec::with_capacity(cfg.num_labels);
    let mut degenerate = vec![false; cfg.num_labels];
    for label in 0..cfg.num_labels {
        let grads = backward_to_projection(bag, params, cfg, label)?;

        // One weight per projected channel: spatial mean of the gradient.
        let mut weights = vec![0.0f64; cfg.proj_dim];
        for g in &grads {
            for k in 0..cfg.proj_dim {
                for y in 0..ph {
                    for x in 0..pw {
                        weights[k] += g.at3(k, y, x).to_f64();
                    }
                }
            }
        }
        for w in &mut weights {
            *w /= n_sites;
        }

        // Rectified weighted channel sum per patch.
        let mut patch_maps = Vec::with_capacity(bag.patches.len());
        for p in &projected {
            let mut m = Tensor::zeros(Shape::d3(1, ph, pw));
            for y in 0..ph {
                for x in 0..pw {
                    let mut acc = 0.0f64;
                    for k in 0..cfg.proj_dim {
                        acc += weights[k] * p.at3(k, y, x).to_f64();
                    }
                    let idx = m.idx3(0, y, x);
                    m.data_mut()[idx] = T::from_f64(acc.max(0.0));
                }
            }
            patch_maps.push(m);
        }
        let refs: Vec<(&Tensor<T>, u32, u32)> = patch_maps
            .iter()
            .zip(bag.patches.iter())
            .map(|(t, p)| (t, p.row, p.col))
            .collect();
        let (mut full, cov) = stitch(&refs)?;

        // Min-max normalize over covered cells.
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for (i, &v) in full.data().iter().enumerate() {
            if cov.data[i] != 0 {
                lo = lo.min(v.to_f64());
                hi = hi.max(v.to_f64());
            }
        }
        if hi - lo < FLAT_SPAN {
            degenerate[label] = true;
            full.fill(T::ZERO);
        } else {
            let span = T::from_f64(hi - lo);
            let lo = T::from_f64(lo);
            for (i, v) in full.data_mut().iter_mut().enumerate() {
                *v = if cov.data[i] != 0 { (*v - lo) / span } else { T::ZERO };
            }
        }
        label_maps.push(full);
    }

    // Assemble the per-label planes into one (C, H, W) map.
    let (h, w) = (label_maps[0].shape().dim(1), label_maps[0].shape().dim(2));
    let mut values = Tensor::zeros(Shape::d3(cfg.num_labels, h, w));
    for (c, m) in label_maps.iter().enumerate() {
        let plane = h * w;
        values.data_mut()[c * plane..(c + 1) * plane].copy_from_slice(m.data());
    }
    Ok(SaliencyOutcome { maps: Heatmap::new(values)?, degenerate })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bag::Patch;
    use crate::model::PoolingMode;
    use crate::rng::Rng;

    #[test]
    fn saliency_values_stay_in_unit_interval() {
        let cfg = ModelConfig {
            embed_dim: 4,
            proj_dim: 3,
            hidden_dim: 4,
            num_labels: 2,
            ..ModelConfig::default()
        };
        let params = ModelParams::<f64>::init(&cfg, &mut Rng::seed_from_u64(2)).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let bag = BagOfPatches {
            bag_id: "s".into(),
            patches: alloc::vec![
                Patch {
                    embedding: Tensor::from_vec(
                        Shape::d3(4, 4, 4),
                        (0..64).map(|_| rng.normal()).collect()
                    )
                    .unwrap(),
                    row: 0,
                    col: 0
                },
                Patch {
                    embedding: Tensor::from_vec(
                        Shape::d3(4, 4, 4),
                        (0..64).map(|_| rng.normal()).collect()
                    )
                    .unwrap(),
                    row: 1,
                    col: 0
                },
            ],
            labels: alloc::vec![1, 0],
            masks: None,
        };
        let out = grad_cam(&bag, &params, &cfg).unwrap();
        for &v in out.maps.values.data() {
            assert!((0.0..=1.0).contains(&v), "saliency {v} outside [0, 1]");
        }
    }

    #[test]
    fn single_signal_channel_yields_proportional_saliency() {
        // Route only projected channel 0 into the scores: channel 1 gets no
        // weight anywhere, so saliency must be proportional to
        // ReLU(w0 * P0), i.e. the min-max-normalized positive part of P0.
        let cfg = ModelConfig {
            embed_dim: 2,
            proj_dim: 2,
            hidden_dim: 2,
            num_labels: 1,
            context_enabled: false,
            threshold_enabled: false,
            pooling_mode: PoolingMode::SmoothMax,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::<f64>::zeroed(&cfg).unwrap();
        // Projection: identity on both channels.
        params.projection.kernel.value.data_mut()[0] = 1.0; // out0 <- in0
        params.projection.kernel.value.data_mut()[3] = 1.0; // out1 <- in1
        // Detection stack reads only channel 0.
        params.detection.conv1.kernel.value.data_mut()[0] = 1.0; // hidden0 <- proj0
        params.detection.conv1.kernel.value.data_mut()[2] = 2.0; // hidden1 <- proj0
        params.detection.conv2.kernel.value.data_mut()[0] = 1.0;
        params.detection.conv2.kernel.value.data_mut()[3] = 1.0;
        params.detection.conv3.kernel.value.data_mut()[0] = 1.5;
        params.detection.conv3.kernel.value.data_mut()[1] = 0.5;

        let mut rng = Rng::seed_from_u64(4);
        let bag = BagOfPatches {
            bag_id: "prop".into(),
            patches: alloc::vec![Patch {
                embedding: Tensor::from_vec(
                    Shape::d3(2, 5, 5),
                    (0..50).map(|_| rng.normal()).collect()
                )
                .unwrap(),
                row: 0,
                col: 0
            }],
            labels: alloc::vec![1],
            masks: None,
        };
        let out = grad_cam(&bag, &params, &cfg).unwrap();
        assert!(!out.degenerate[0]);

        // With w1 = 0 the saliency must be normalize(ReLU(w0 * P0)) for some
        // scalar w0, i.e. match the normalized rectified activation of
        // channel 0 up to the sign of w0.
        let proj = project_bag(&bag, &params).unwrap();
        let p0: Vec<f64> = (0..25).map(|i| proj[0].data()[i]).collect();
        let normalize = |vals: Vec<f64>| -> Vec<f64> {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            vals.iter().map(|v| (v - lo) / (hi - lo)).collect()
        };
        let pos = normalize(p0.iter().map(|v| v.max(0.0)).collect());
        let neg = normalize(p0.iter().map(|v| (-v).max(0.0)).collect());
        let sal: Vec<f64> = out.maps.values.data().to_vec();
        let matches = |expect: &[f64]| sal.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-9);
        assert!(
            matches(&pos) || matches(&neg),
            "saliency is not a rectified transform of the routed channel"
        );

        // And it must ignore the unrouted channel entirely.
        let mut altered = bag.clone();
        for y in 0..5 {
            for x in 0..5 {
                let idx = altered.patches[0].embedding.idx3(1, y, x);
                altered.patches[0].embedding.data_mut()[idx] += 3.5;
            }
        }
        let out2 = grad_cam(&altered, &params, &cfg).unwrap();
        assert_eq!(out.maps.values, out2.maps.values);
    }
}
