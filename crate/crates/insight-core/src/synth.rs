//! Synthetic weak-supervision benchmark.
//!
//! Each positive bag plants one or more elliptical lesions on the stitched
//! grid by shifting a fixed per-label subset of embedding channels inside
//! the region; everything else is Gaussian noise. Bag labels are the only
//! training signal; the planted masks exist solely to evaluate heatmaps.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::bag::{BagOfPatches, Patch};
use crate::error::{CoreError, Result};
use crate::mask::{BinaryMask, MaskStack};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

/// Lesion-size bin expressed as a fraction of the stitched-grid area.
pub type AreaFraction = (f64, f64);

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SynthConfig {
    pub train_bags: usize,
    pub val_bags: usize,
    pub test_bags: usize,
    /// Patch grid extents.
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Spatial extents of each patch embedding.
    pub patch_h: usize,
    pub patch_w: usize,
    pub embed_dim: usize,
    pub num_labels: usize,
    /// (lo, hi) area fractions per size bin, ascending.
    pub lesion_area_fractions: Vec<AreaFraction>,
    /// Upper bound on lesions planted per positive label.
    pub max_lesions_per_label: usize,
    /// How many embedding channels carry the class signal.
    pub signal_channels: usize,
    /// Mean shift applied to signal channels inside a lesion.
    pub signal_strength: f64,
    /// Radial intensity falloff in [0, 1): 0 = flat lesions, larger values
    /// make lesion rims weaker than cores.
    pub edge_softness: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    /// Desk-scale single-label preset: an 8x8 grid of 7x7 patches
    /// (56x56 stitched map) with 16-channel embeddings.
    fn default() -> Self {
        SynthConfig {
            train_bags: 60,
            val_bags: 20,
            test_bags: 40,
            grid_rows: 8,
            grid_cols: 8,
            patch_h: 7,
            patch_w: 7,
            embed_dim: 16,
            num_labels: 1,
            lesion_area_fractions: vec![(0.005, 0.019), (0.019, 0.08), (0.08, 0.2)],
            max_lesions_per_label: 2,
            signal_channels: 6,
            signal_strength: 2.5,
            edge_softness: 0.2,
            noise_std: 1.0,
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Preset matching the production embedding geometry (14x14x1024 per
    /// patch); tiny bag counts, meant for shape-fidelity tests only.
    pub fn production_shape() -> Self {
        SynthConfig {
            train_bags: 2,
            val_bags: 2,
            test_bags: 2,
            grid_rows: 2,
            grid_cols: 2,
            patch_h: 14,
            patch_w: 14,
            embed_dim: 1024,
            signal_channels: 32,
            ..SynthConfig::default()
        }
    }

    pub fn full_height(&self) -> usize {
        self.grid_rows * self.patch_h
    }

    pub fn full_width(&self) -> usize {
        self.grid_cols * self.patch_w
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0 || self.grid_cols == 0 || self.patch_h == 0 || self.patch_w == 0 {
            return Err(CoreError::Config("grid and patch extents must be positive".into()));
        }
        if self.embed_dim == 0 || self.num_labels == 0 {
            return Err(CoreError::Config("embed_dim and num_labels must be positive".into()));
        }
        if self.train_bags < 2 || self.val_bags < 2 || self.test_bags < 2 {
            return Err(CoreError::Config(
                "each split needs at least 2 bags to hold both classes".into(),
            ));
        }
        if self.lesion_area_fractions.is_empty() {
            return Err(CoreError::Config("at least one lesion size bin is required".into()));
        }
        for &(lo, hi) in &self.lesion_area_fractions {
            if !(0.0 < lo && lo < hi && hi < 1.0) {
                return Err(CoreError::Config(format!(
                    "lesion area fractions must satisfy 0 < lo < hi < 1, got ({lo}, {hi})"
                )));
            }
        }
        if self.max_lesions_per_label == 0 {
            return Err(CoreError::Config("max_lesions_per_label must be >= 1".into()));
        }
        if self.signal_channels == 0 || self.signal_channels > self.embed_dim {
            return Err(CoreError::Config(format!(
                "signal_channels must lie in [1, embed_dim], got {}",
                self.signal_channels
            )));
        }
        if self.signal_strength < 0.0 {
            return Err(CoreError::Config("signal_strength must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.edge_softness) {
            return Err(CoreError::Config("edge_softness must lie in [0, 1)".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(CoreError::Config("noise_std must be > 0".into()));
        }
        Ok(())
    }
}

/// Generated splits.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub train: Vec<BagOfPatches<f32>>,
    pub val: Vec<BagOfPatches<f32>>,
    pub test: Vec<BagOfPatches<f32>>,
}

impl SynthDataset {
    pub fn split(&self, name: &str) -> Option<&[BagOfPatches<f32>]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }
}

struct Ellipse {
    cy: f64,
    cx: f64,
    a: f64, // semi-axis along x
    b: f64, // semi-axis along y
}

impl Ellipse {
    /// Pixels inside the ellipse with their squared normalized radius.
    fn rasterize(&self, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
        let y0 = libm::floor(self.cy - self.b).max(0.0) as usize;
        let y1 = (libm::ceil(self.cy + self.b) as usize).min(h - 1);
        let x0 = libm::floor(self.cx - self.a).max(0.0) as usize;
        let x1 = (libm::ceil(self.cx + self.a) as usize).min(w - 1);
        let mut out = Vec::new();
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dy = (y as f64 - self.cy) / self.b;
                let dx = (x as f64 - self.cx) / self.a;
                let r2 = dx * dx + dy * dy;
                if r2 <= 1.0 {
                    out.push((y, x, r2));
                }
            }
        }
        out
    }
}

/// Plant one lesion whose rasterized area lands inside the chosen bin.
fn plant_lesion(
    cfg: &SynthConfig,
    bin: AreaFraction,
    rng: &mut Rng,
) -> Result<Vec<(usize, usize, f64)>> {
    let (h, w) = (cfg.full_height(), cfg.full_width());
    let grid_area = (h * w) as f64;
    let lo_px = libm::ceil(bin.0 * grid_area) as usize;
    let hi_px = (libm::floor(bin.1 * grid_area) as usize).max(lo_px);
    let target = rng.uniform(bin.0, bin.1) * grid_area;
    let aspect = rng.uniform(0.7, 1.5);
    let mut a = libm::sqrt(target * aspect / core::f64::consts::PI);
    let mut b = libm::sqrt(target / (aspect * core::f64::consts::PI));
    let max_a = (w as f64 - 1.0) / 2.0;
    let max_b = (h as f64 - 1.0) / 2.0;
    if a > max_a || b > max_b {
        return Err(CoreError::Config(format!(
            "lesion bin ({}, {}) needs semi-axes ({a:.1}, {b:.1}) exceeding the {h}x{w} grid",
            bin.0, bin.1
        )));
    }
    let cy = rng.uniform(b, h as f64 - 1.0 - b);
    let cx = rng.uniform(a, w as f64 - 1.0 - a);

    // Rasterization error can push tiny ellipses out of their bin; nudge the
    // axes until the pixel count lands inside it.
    for _ in 0..64 {
        let pixels = Ellipse { cy, cx, a, b }.rasterize(h, w);
        if pixels.len() < lo_px {
            a *= 1.05;
            b *= 1.05;
            if a > max_a || b > max_b {
                return Err(CoreError::Config(format!(
                    "lesion bin ({}, {}) cannot fit the {h}x{w} grid",
                    bin.0, bin.1
                )));
            }
        } else if pixels.len() > hi_px {
            a /= 1.05;
            b /= 1.05;
        } else {
            return Ok(pixels);
        }
    }
    Err(CoreError::Config(format!(
        "could not rasterize a lesion inside bin ({}, {})",
        bin.0, bin.1
    )))
}

fn generate_bag(
    cfg: &SynthConfig,
    bag_id: String,
    labels: &[u8],
    signal_channels: &[Vec<usize>],
    rng: &mut Rng,
) -> Result<BagOfPatches<f32>> {
    let (h, w) = (cfg.full_height(), cfg.full_width());
    let patch_len = cfg.embed_dim * cfg.patch_h * cfg.patch_w;

    // Noise base for every patch, row-major over the grid.
    let mut patches: Vec<Patch<f32>> = Vec::with_capacity(cfg.grid_rows * cfg.grid_cols);
    for row in 0..cfg.grid_rows {
        for col in 0..cfg.grid_cols {
            let data: Vec<f32> =
                (0..patch_len).map(|_| (rng.normal() * cfg.noise_std) as f32).collect();
            patches.push(Patch {
                embedding: Tensor::from_vec(
                    Shape::d3(cfg.embed_dim, cfg.patch_h, cfg.patch_w),
                    data,
                )
                .unwrap(),
                row: row as u32,
                col: col as u32,
            });
        }
    }

    let mut masks = MaskStack::blank(cfg.num_labels, h, w);
    for (label, &positive) in labels.iter().enumerate() {
        if positive == 0 {
            continue;
        }
        let mut lesions = 1;
        if cfg.max_lesions_per_label > 1 && rng.next_f64() < 0.35 {
            lesions += rng.below(cfg.max_lesions_per_label - 1) + 1;
        }
        for _ in 0..lesions {
            let bin = cfg.lesion_area_fractions[rng.below(cfg.lesion_area_fractions.len())];
            let pixels = plant_lesion(cfg, bin, rng)?;
            for &(y, x, r2) in &pixels {
                masks.planes[label].set(y, x, true);
                let intensity = cfg.signal_strength * (1.0 - cfg.edge_softness * r2);
                let patch = &mut patches[(y / cfg.patch_h) * cfg.grid_cols + (x / cfg.patch_w)];
                let (py, px) = (y % cfg.patch_h, x % cfg.patch_w);
                for &ch in &signal_channels[label] {
                    let idx = patch.embedding.idx3(ch, py, px);
                    patch.embedding.data_mut()[idx] += intensity as f32;
                }
            }
        }
    }

    Ok(BagOfPatches { bag_id, patches, labels: labels.to_vec(), masks: Some(masks) })
}

fn split_labels(cfg: &SynthConfig, count: usize, rng: &mut Rng) -> Vec<Vec<u8>> {
    let mut labels: Vec<Vec<u8>> = (0..count)
        .map(|_| (0..cfg.num_labels).map(|_| (rng.next_f64() < 0.5) as u8).collect())
        .collect();
    // Every split must hold both classes of every label.
    for c in 0..cfg.num_labels {
        let positives = labels.iter().filter(|l| l[c] == 1).count();
        if positives == 0 {
            labels[c % count][c] = 1;
        } else if positives == count {
            labels[c % count][c] = 0;
        }
    }
    labels
}

/// Deterministically generate train/val/test splits from the config seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);

    // Fixed per-label channel subsets, drawn once for the whole dataset.
    let mut signal_channels = Vec::with_capacity(cfg.num_labels);
    for _ in 0..cfg.num_labels {
        let mut all: Vec<usize> = (0..cfg.embed_dim).collect();
        rng.shuffle(&mut all);
        let mut subset = all[..cfg.signal_channels].to_vec();
        subset.sort_unstable();
        signal_channels.push(subset);
    }

    let make_split =
        |name: &str, count: usize, rng: &mut Rng| -> Result<Vec<BagOfPatches<f32>>> {
            let labels = split_labels(cfg, count, rng);
            let mut bags = Vec::with_capacity(count);
            for (i, bag_labels) in labels.iter().enumerate() {
                bags.push(generate_bag(
                    cfg,
                    format!("{name}_{i:05}"),
                    bag_labels,
                    &signal_channels,
                    rng,
                )?);
            }
            Ok(bags)
        };

    Ok(SynthDataset {
        train: make_split("train", cfg.train_bags, &mut rng)?,
        val: make_split("val", cfg.val_bags, &mut rng)?,
        test: make_split("test", cfg.test_bags, &mut rng)?,
    })
}

/// Union of all label planes of one bag.
pub fn union_mask(bag: &BagOfPatches<f32>) -> Option<BinaryMask> {
    let masks = bag.masks.as_ref()?;
    let (h, w) = masks.extents()?;
    let mut out = BinaryMask::zeros(h, w);
    for plane in &masks.planes {
        for (o, &v) in out.data.iter_mut().zip(plane.data.iter()) {
            *o |= v;
        }
    }
    Some(out)
}
