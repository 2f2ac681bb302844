//! Binary masks for ground truth and binarized heatmaps.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};

/// 2-D binary mask; one byte per pixel, 0 = background, 1 = foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask { height, width, data: vec![0; height * width] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(CoreError::Dimension(format!(
                "mask payload of {} bytes does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(CoreError::Argument(format!(
                "mask values must be 0 or 1, found {v}"
            )));
        }
        Ok(BinaryMask { height, width, data })
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value as u8;
    }

    /// Number of foreground pixels.
    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_blank(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn same_extents(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }
}

/// One binary plane per label, all sharing the stitched-grid extents.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MaskStack {
    pub planes: Vec<BinaryMask>,
}

impl MaskStack {
    pub fn new(planes: Vec<BinaryMask>) -> Result<Self> {
        if let Some(first) = planes.first() {
            let (h, w) = (first.height, first.width);
            if planes.iter().any(|p| p.height != h || p.width != w) {
                return Err(CoreError::Dimension(
                    "mask planes disagree on extents".into(),
                ));
            }
        }
        Ok(MaskStack { planes })
    }

    pub fn blank(num_labels: usize, height: usize, width: usize) -> Self {
        MaskStack {
            planes: (0..num_labels).map(|_| BinaryMask::zeros(height, width)).collect(),
        }
    }

    pub fn extents(&self) -> Option<(usize, usize)> {
        self.planes.first().map(|p| (p.height, p.width))
    }
}
