//! Weakly-supervised aggregation over bags of patch embeddings.
//!
//! A bag is a set of spatially-indexed feature maps (WSI tiles, CT slices)
//! carrying a single label vector. The model scores every spatial site through
//! two convolutional branches — a small-kernel detection branch and a
//! larger-kernel context branch whose output suppresses spurious detections —
//! fuses them into a per-label heatmap, thresholds the stitched map with
//! Otsu's method, and pools the surviving activations into bag probabilities
//! with a Boltzmann-weighted smooth maximum. Heatmaps fall out of the forward
//! pass; no post-hoc saliency is needed.
//!
//! The crate is `no_std`-compatible (`alloc` required): disable the default
//! `std` feature for embedded or wasm targets. File formats, the CLI, and
//! everything that touches the filesystem live in the companion `insight`
//! crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod bag;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod otsu;
pub mod pool;
pub mod real;
pub mod resample;
pub mod rng;
pub mod saliency;
pub mod synth;
pub mod tensor;
pub mod train;

pub use bag::{BagOfPatches, Patch};
pub use error::CoreError;
pub use mask::{BinaryMask, MaskStack};
pub use real::Real;
pub use tensor::{ConvLayer, GradPair, Shape, Tensor};
