//! The unit of weak supervision: a bag of spatially-indexed patch embeddings
//! with a single label vector.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mask::MaskStack;
use crate::real::Real;
use crate::tensor::Tensor;

/// One patch: an (embed_dim, h, w) feature map and its grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    pub embedding: Tensor<T>,
    pub row: u32,
    pub col: u32,
}

/// A set of patches with bag-level labels and an optional ground-truth mask
/// aligned to the stitched grid. Only the labels supervise training; masks
/// exist purely for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOfPatches<T> {
    pub bag_id: String,
    pub patches: Vec<Patch<T>>,
    /// One 0/1 entry per label.
    pub labels: Vec<u8>,
    pub masks: Option<MaskStack>,
}

impl<T: Real> BagOfPatches<T> {
    /// Extents of the stitched grid implied by the patch coordinates.
    pub fn stitched_extents(&self) -> Option<(usize, usize)> {
        let first = self.patches.first()?;
        let (ph, pw) = (first.embedding.shape().dim(1), first.embedding.shape().dim(2));
        let rows = self.patches.iter().map(|p| p.row).max()? as usize + 1;
        let cols = self.patches.iter().map(|p| p.col).max()? as usize + 1;
        Some((rows * ph, cols * pw))
    }

    /// Structural checks: at least one patch, consistent embedding shapes,
    /// unique coordinates, label/mask agreement.
    pub fn validate(&self) -> Result<()> {
        let first = self
            .patches
            .first()
            .ok_or_else(|| CoreError::Argument(format!("bag {} has no patches", self.bag_id)))?;
        let shape = first.embedding.shape();
        if shape.rank() != 3 {
            return Err(CoreError::Dimension(format!(
                "bag {}: patch embeddings must be rank 3, got {shape}",
                self.bag_id
            )));
        }
        for p in &self.patches {
            if p.embedding.shape() != shape {
                return Err(CoreError::Dimension(format!(
                    "bag {}: patch at ({}, {}) has shape {}, expected {shape}",
                    self.bag_id,
                    p.row,
                    p.col,
                    p.embedding.shape()
                )));
            }
        }
        let mut coords: Vec<(u32, u32)> = self.patches.iter().map(|p| (p.row, p.col)).collect();
        coords.sort_unstable();
        for pair in coords.windows(2) {
            if pair[0] == pair[1] {
                return Err(CoreError::Layout(format!(
                    "bag {}: duplicate patch coordinate ({}, {})",
                    self.bag_id, pair[0].0, pair[0].1
                )));
            }
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(CoreError::Argument(format!(
                "bag {}: labels must be 0 or 1",
                self.bag_id
            )));
        }
        if let Some(masks) = &self.masks {
            if masks.planes.len() != self.labels.len() {
                return Err(CoreError::Dimension(format!(
                    "bag {}: {} mask planes for {} labels",
                    self.bag_id,
                    masks.planes.len(),
                    self.labels.len()
                )));
            }
            if let (Some((mh, mw)), Some((sh, sw))) = (masks.extents(), self.stitched_extents()) {
                if (mh, mw) != (sh, sw) {
                    return Err(CoreError::Dimension(format!(
                        "bag {}: mask extents {mh}x{mw} do not match stitched grid {sh}x{sw}",
                        self.bag_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> BagOfPatches<U> {
        BagOfPatches {
            bag_id: self.bag_id.clone(),
            patches: self
                .patches
                .iter()
                .map(|p| Patch { embedding: p.embedding.cast(), row: p.row, col: p.col })
                .collect(),
            labels: self.labels.clone(),
            masks: self.masks.clone(),
        }
    }
}
