//! The dual-module aggregation network.
//!
//! Per patch: a 1x1 linear projection feeds two convolutional stacks. The
//! detection stack (small kernels) scores fine detail; the context stack
//! (larger kernels) scores surroundings, and its sigmoid acts as a gate that
//! suppresses detections in high-context regions:
//!
//! ```text
//! H = sigmoid((1 - sigmoid(H_con)) * H_det)
//! ```
//!
//! Patch heatmaps are stitched onto the bag grid, thresholded per label with
//! Otsu's method (values at or below the threshold are zeroed; the mask is a
//! constant in backward), and pooled into one probability per label.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::bag::BagOfPatches;
use crate::error::{CoreError, Result};
use crate::loss::PROB_EPS;
use crate::mask::BinaryMask;
use crate::otsu::{otsu_threshold, OtsuResult};
use crate::pool::{
    lp_pool, lp_pool_backward, max_pool, max_pool_backward, smoothmax_backward, smoothmax_pool,
};
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{
    conv2d_backward, conv2d_raw, gelu, gelu_backward, layer_norm, layer_norm_backward,
    sigmoid_scalar, GradPair, Shape, Tensor,
};

/// How pooled channel activations become a bag probability.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PoolingMode {
    SmoothMax,
    Max,
    Lp,
}

/// Outputs outside this range are clipped before they are used as
/// probabilities (LP pooling can overshoot [0, 1]).
pub const LP_CLIP: f64 = 1e-6;

/// Architecture and inference-time hyperparameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    /// Channels of the incoming patch embeddings.
    pub embed_dim: usize,
    /// Channels after the linear projection.
    pub proj_dim: usize,
    /// Channels of the two hidden convolution layers.
    pub hidden_dim: usize,
    /// Number of labels C; heatmaps carry one channel per label.
    pub num_labels: usize,
    /// Kernel size of the detection stack (odd; default 1).
    pub detection_kernel: usize,
    /// Kernel size of the context stack (odd; default 3).
    pub context_kernel: usize,
    /// SmoothMax sharpness.
    pub alpha: f64,
    /// Histogram bins for Otsu thresholding.
    pub otsu_bins: usize,
    pub pooling_mode: PoolingMode,
    /// Exponent for LP pooling (>= 2; unused otherwise).
    pub lp_p: f64,
    /// Context-suppression switch (off = CS ablation).
    pub context_enabled: bool,
    /// Otsu masking switch.
    pub threshold_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 1024,
            proj_dim: 128,
            hidden_dim: 64,
            num_labels: 1,
            detection_kernel: 1,
            context_kernel: 3,
            alpha: 8.0,
            otsu_bins: 256,
            pooling_mode: PoolingMode::SmoothMax,
            lp_p: 2.0,
            context_enabled: true,
            threshold_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.proj_dim == 0 || self.hidden_dim == 0 {
            return Err(CoreError::Config("channel counts must be positive".into()));
        }
        if self.proj_dim > self.embed_dim {
            return Err(CoreError::Config(format!(
                "proj_dim {} exceeds embed_dim {}",
                self.proj_dim, self.embed_dim
            )));
        }
        if self.num_labels == 0 {
            return Err(CoreError::Config("num_labels must be >= 1".into()));
        }
        if self.detection_kernel % 2 == 0 || self.context_kernel % 2 == 0 {
            return Err(CoreError::Config("kernel sizes must be odd".into()));
        }
        if self.alpha <= 0.0 {
            return Err(CoreError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.otsu_bins < 2 {
            return Err(CoreError::Config("otsu_bins must be >= 2".into()));
        }
        if self.pooling_mode == PoolingMode::Lp && self.lp_p < 2.0 {
            return Err(CoreError::Config(format!("lp_p must be >= 2, got {}", self.lp_p)));
        }
        Ok(())
    }

    /// Total number of learnable scalars; a pure function of the config.
    pub fn param_count(&self) -> usize {
        let stack = |k: usize| {
            let kk = k * k;
            let conv1 = self.hidden_dim * self.proj_dim * kk + self.hidden_dim;
            let norm1 = 2 * self.hidden_dim;
            let conv2 = self.hidden_dim * self.hidden_dim * kk + self.hidden_dim;
            let norm2 = 2 * self.hidden_dim;
            let conv3 = self.num_labels * self.hidden_dim * kk + self.num_labels;
            conv1 + norm1 + conv2 + norm2 + conv3
        };
        let projection = self.proj_dim * self.embed_dim + self.proj_dim;
        projection + stack(self.detection_kernel) + stack(self.context_kernel)
    }
}

/// Convolution weights with gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam<T> {
    pub kernel: GradPair<T>,
    pub bias: GradPair<T>,
    pub padding: usize,
}

impl<T: Real> ConvParam<T> {
    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_raw(x, &self.kernel.value, Some(&self.bias.value), self.padding)
    }

    /// Accumulates kernel/bias gradients and returns the input gradient.
    fn backward(&mut self, input: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (d_in, d_k, d_b) = conv2d_backward(input, &self.kernel.value, self.padding, d_out)?;
        self.kernel.grad.add_assign(&d_k)?;
        self.bias.grad.add_assign(&d_b)?;
        Ok(d_in)
    }
}

/// Layer-norm affine weights with gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParam<T> {
    pub gain: GradPair<T>,
    pub shift: GradPair<T>,
}

/// One three-layer convolutional stack: conv - GELU - LN - conv - GELU - LN - conv.
#[derive(Debug, Clone, PartialEq)]
pub struct StackParams<T> {
    pub conv1: ConvParam<T>,
    pub norm1: NormParam<T>,
    pub conv2: ConvParam<T>,
    pub norm2: NormParam<T>,
    pub conv3: ConvParam<T>,
}

/// All learnable weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub projection: ConvParam<T>,
    pub detection: StackParams<T>,
    pub context: StackParams<T>,
}

fn conv_param_zeroed<T: Real>(out_ch: usize, in_ch: usize, k: usize) -> ConvParam<T> {
    ConvParam {
        kernel: GradPair::new(Tensor::zeros(Shape::d4(out_ch, in_ch, k, k))),
        bias: GradPair::new(Tensor::zeros(Shape::d1(out_ch))),
        padding: (k - 1) / 2,
    }
}

fn norm_param_identity<T: Real>(ch: usize) -> NormParam<T> {
    NormParam {
        gain: GradPair::new(Tensor::filled(Shape::d1(ch), T::ONE)),
        shift: GradPair::new(Tensor::zeros(Shape::d1(ch))),
    }
}

fn stack_zeroed<T: Real>(cfg: &ModelConfig, k: usize) -> StackParams<T> {
    StackParams {
        conv1: conv_param_zeroed(cfg.hidden_dim, cfg.proj_dim, k),
        norm1: norm_param_identity(cfg.hidden_dim),
        conv2: conv_param_zeroed(cfg.hidden_dim, cfg.hidden_dim, k),
        norm2: norm_param_identity(cfg.hidden_dim),
        conv3: conv_param_zeroed(cfg.num_labels, cfg.hidden_dim, k),
    }
}

impl<T: Real> ModelParams<T> {
    /// All kernels and biases at zero; layer-norm gains at one.
    pub fn zeroed(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            projection: conv_param_zeroed(cfg.proj_dim, cfg.embed_dim, 1),
            detection: stack_zeroed(cfg, cfg.detection_kernel),
            context: stack_zeroed(cfg, cfg.context_kernel),
        })
    }

    /// Fan-in-scaled uniform kernels (bound sqrt(1/fan_in)), zero biases,
    /// identity layer norms.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = Self::zeroed(cfg)?;
        params.for_each_mut(&mut |name: &str, pair: &mut GradPair<T>| {
            if name.ends_with(".kernel") {
                let s = pair.value.shape();
                let fan_in = s.dim(1) * s.dim(2) * s.dim(3);
                let bound = libm::sqrt(1.0 / fan_in as f64);
                for v in pair.value.data_mut() {
                    *v = T::from_f64(rng.uniform(-bound, bound));
                }
            }
        });
        Ok(params)
    }

    /// Visit every parameter in a fixed, documented order.
    pub fn for_each(&self, f: &mut dyn FnMut(&str, &GradPair<T>)) {
        let stack = |prefix: &str, s: &StackParams<T>, f: &mut dyn FnMut(&str, &GradPair<T>)| {
            f(&format!("{prefix}.conv1.kernel"), &s.conv1.kernel);
            f(&format!("{prefix}.conv1.bias"), &s.conv1.bias);
            f(&format!("{prefix}.norm1.gain"), &s.norm1.gain);
            f(&format!("{prefix}.norm1.shift"), &s.norm1.shift);
            f(&format!("{prefix}.conv2.kernel"), &s.conv2.kernel);
            f(&format!("{prefix}.conv2.bias"), &s.conv2.bias);
            f(&format!("{prefix}.norm2.gain"), &s.norm2.gain);
            f(&format!("{prefix}.norm2.shift"), &s.norm2.shift);
            f(&format!("{prefix}.conv3.kernel"), &s.conv3.kernel);
            f(&format!("{prefix}.conv3.bias"), &s.conv3.bias);
        };
        f("projection.kernel", &self.projection.kernel);
        f("projection.bias", &self.projection.bias);
        stack("detection", &self.detection, f);
        stack("context", &self.context, f);
    }

    /// Mutable visit in the same order as [`ModelParams::for_each`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut GradPair<T>)) {
        let stack =
            |prefix: &str, s: &mut StackParams<T>, f: &mut dyn FnMut(&str, &mut GradPair<T>)| {
                f(&format!("{prefix}.conv1.kernel"), &mut s.conv1.kernel);
                f(&format!("{prefix}.conv1.bias"), &mut s.conv1.bias);
                f(&format!("{prefix}.norm1.gain"), &mut s.norm1.gain);
                f(&format!("{prefix}.norm1.shift"), &mut s.norm1.shift);
                f(&format!("{prefix}.conv2.kernel"), &mut s.conv2.kernel);
                f(&format!("{prefix}.conv2.bias"), &mut s.conv2.bias);
                f(&format!("{prefix}.norm2.gain"), &mut s.norm2.gain);
                f(&format!("{prefix}.norm2.shift"), &mut s.norm2.shift);
                f(&format!("{prefix}.conv3.kernel"), &mut s.conv3.kernel);
                f(&format!("{prefix}.conv3.bias"), &mut s.conv3.bias);
            };
        f("projection.kernel", &mut self.projection.kernel);
        f("projection.bias", &mut self.projection.bias);
        stack("detection", &mut self.detection, f);
        stack("context", &mut self.context, f);
    }

    pub fn zero_grad(&mut self) {
        self.for_each_mut(&mut |_, pair| pair.zero_grad());
    }

    /// Number of learnable scalars actually held.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |_, pair| n += pair.value.len());
        n
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |c: &ConvParam<T>| ConvParam {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
            padding: c.padding,
        };
        let norm = |n: &NormParam<T>| NormParam { gain: n.gain.cast(), shift: n.shift.cast() };
        let stack = |s: &StackParams<T>| StackParams {
            conv1: conv(&s.conv1),
            norm1: norm(&s.norm1),
            conv2: conv(&s.conv2),
            norm2: norm(&s.norm2),
            conv3: conv(&s.conv3),
        };
        ModelParams {
            projection: conv(&self.projection),
            detection: stack(&self.detection),
            context: stack(&self.context),
        }
    }
}

/// Per-label relevance maps, shaped (num_labels, h, w).
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap<T> {
    pub values: Tensor<T>,
}

impl<T: Real> Heatmap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.shape().rank() != 3 {
            return Err(CoreError::Dimension(format!(
                "heatmap must be rank 3, got {}",
                values.shape()
            )));
        }
        Ok(Heatmap { values })
    }

    pub fn num_labels(&self) -> usize {
        self.values.shape().dim(0)
    }

    pub fn height(&self) -> usize {
        self.values.shape().dim(1)
    }

    pub fn width(&self) -> usize {
        self.values.shape().dim(2)
    }

    /// Row-major slice of one label channel.
    pub fn channel(&self, label: usize) -> &[T] {
        let plane = self.height() * self.width();
        &self.values.data()[label * plane..(label + 1) * plane]
    }
}

/// 1x1 linear projection of an embedding onto `proj_dim` channels.
pub fn project<T: Real>(embedding: &Tensor<T>, params: &ModelParams<T>) -> Result<Tensor<T>> {
    params.projection.forward(embedding)
}

/// Intermediates of one stack pass, kept for the backward sweep.
#[derive(Debug, Clone)]
pub struct StackTrace<T> {
    a1: Tensor<T>,
    g1: Tensor<T>,
    n1: Tensor<T>,
    a2: Tensor<T>,
    g2: Tensor<T>,
    n2: Tensor<T>,
    pub raw: Tensor<T>,
}

fn stack_forward<T: Real>(x: &Tensor<T>, p: &StackParams<T>) -> Result<StackTrace<T>> {
    let a1 = p.conv1.forward(x)?;
    let g1 = gelu(&a1)?;
    let n1 = layer_norm(&g1, &p.norm1.gain.value, &p.norm1.shift.value)?;
    let a2 = p.conv2.forward(&n1)?;
    let g2 = gelu(&a2)?;
    let n2 = layer_norm(&g2, &p.norm2.gain.value, &p.norm2.shift.value)?;
    let raw = p.conv3.forward(&n2)?;
    Ok(StackTrace { a1, g1, n1, a2, g2, n2, raw })
}

fn stack_backward<T: Real>(
    p: &mut StackParams<T>,
    trace: &StackTrace<T>,
    input: &Tensor<T>,
    d_raw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d_n2 = p.conv3.backward(&trace.n2, d_raw)?;
    let (d_g2, d_gain2, d_shift2) = layer_norm_backward(&trace.g2, &p.norm2.gain.value, &d_n2)?;
    p.norm2.gain.grad.add_assign(&d_gain2)?;
    p.norm2.shift.grad.add_assign(&d_shift2)?;
    let d_a2 = gelu_backward(&trace.a2, &d_g2)?;
    let d_n1 = p.conv2.backward(&trace.n1, &d_a2)?;
    let (d_g1, d_gain1, d_shift1) = layer_norm_backward(&trace.g1, &p.norm1.gain.value, &d_n1)?;
    p.norm1.gain.grad.add_assign(&d_gain1)?;
    p.norm1.shift.grad.add_assign(&d_shift1)?;
    let d_a1 = gelu_backward(&trace.a1, &d_g1)?;
    p.conv1.backward(input, &d_a1)
}

/// Raw (pre-sigmoid) detection scores for a projected feature map.
pub fn detection_forward<T: Real>(x: &Tensor<T>, params: &ModelParams<T>) -> Result<Heatmap<T>> {
    Heatmap::new(stack_forward(x, &params.detection)?.raw)
}

/// Raw (pre-sigmoid) context scores for a projected feature map.
pub fn context_forward<T: Real>(x: &Tensor<T>, params: &ModelParams<T>) -> Result<Heatmap<T>> {
    Heatmap::new(stack_forward(x, &params.context)?.raw)
}

/// Fuse detection and context scores: H = sigmoid((1 - sigmoid(con)) * det).
/// With the context branch disabled the map is simply sigmoid(det).
pub fn fuse<T: Real>(det: &Heatmap<T>, con: Option<&Heatmap<T>>) -> Result<Heatmap<T>> {
    if let Some(con) = con {
        if det.values.shape() != con.values.shape() {
            return Err(CoreError::Dimension(format!(
                "fuse shapes {} vs {}",
                det.values.shape(),
                con.values.shape()
            )));
        }
    }
    let mut out = Tensor::zeros(det.values.shape());
    for i in 0..out.len() {
        let d = det.values.data()[i];
        let u = match con {
            Some(con) => (T::ONE - sigmoid_scalar(con.values.data()[i])) * d,
            None => d,
        };
        out.data_mut()[i] = sigmoid_scalar(u);
    }
    Heatmap::new(out)
}

/// Zero every entry at or below the threshold; kept entries are unchanged.
/// In backward the mask is a constant: zeroed entries receive no gradient.
pub fn apply_mask<T: Real>(h: &Heatmap<T>, threshold: T) -> Heatmap<T> {
    let mut out = h.values.clone();
    for v in out.data_mut() {
        if *v <= threshold {
            *v = T::ZERO;
        }
    }
    Heatmap { values: out }
}

/// Place per-patch maps onto the bag grid by their (row, col) coordinates.
///
/// Returns the stitched (C, H, W) tensor plus a coverage mask over grid
/// cells; uncovered cells are zero-filled and excluded from thresholding
/// and pooling downstream.
pub fn stitch<T: Real>(patches: &[(&Tensor<T>, u32, u32)]) -> Result<(Tensor<T>, BinaryMask)> {
    let (first, _, _) = patches
        .first()
        .ok_or_else(|| CoreError::Argument("stitch of an empty patch list".into()))?;
    let shape = first.shape();
    let (c, ph, pw) = (shape.dim(0), shape.dim(1), shape.dim(2));
    let mut max_row = 0u32;
    let mut max_col = 0u32;
    for (t, row, col) in patches {
        if t.shape() != shape {
            return Err(CoreError::Dimension(format!(
                "stitch patch shapes disagree: {} vs {shape}",
                t.shape()
            )));
        }
        max_row = max_row.max(*row);
        max_col = max_col.max(*col);
    }
    let h = (max_row as usize + 1) * ph;
    let w = (max_col as usize + 1) * pw;
    let mut full = Tensor::zeros(Shape::d3(c, h, w));
    let mut coverage = BinaryMask::zeros(h, w);
    for (t, row, col) in patches {
        let oy = *row as usize * ph;
        let ox = *col as usize * pw;
        if coverage.get(oy, ox) {
            return Err(CoreError::Layout(format!(
                "duplicate patch coordinate ({row}, {col})"
            )));
        }
        for ch in 0..c {
            for y in 0..ph {
                for x in 0..pw {
                    let idx = full.idx3(ch, oy + y, ox + x);
                    full.data_mut()[idx] = t.at3(ch, y, x);
                }
            }
        }
        for y in 0..ph {
            for x in 0..pw {
                coverage.set(oy + y, ox + x, true);
            }
        }
    }
    Ok((full, coverage))
}

/// Prediction for one bag.
#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction<T> {
    /// Pooled probability per label, each strictly inside (0, 1).
    pub y_hat: Vec<T>,
    /// logit(y_hat) per label, clamped so the value is finite.
    pub z: Vec<T>,
    /// Fused heatmap over the stitched grid (unmasked; zeros where uncovered).
    pub full_heatmap: Heatmap<T>,
    /// Heatmap after per-label Otsu masking.
    pub masked_heatmap: Heatmap<T>,
    /// Per-label threshold outcome; `None` when thresholding is disabled.
    pub thresholds: Vec<Option<OtsuResult<T>>>,
    /// Grid cells actually covered by a patch.
    pub coverage: BinaryMask,
}

/// Everything backward needs to replay the forward pass.
pub struct BagTrace<T> {
    projected: Vec<Tensor<T>>,
    det: Vec<StackTrace<T>>,
    con: Vec<Option<StackTrace<T>>>,
    fused: Vec<Tensor<T>>,
    /// Flat spatial indices of covered cells, in row-major order.
    covered_cells: Vec<usize>,
    /// Per label: masked channel values over `covered_cells`.
    masked_values: Vec<Vec<T>>,
    /// Per label: argmax position within `covered_cells` (max pooling only).
    argmax: Vec<usize>,
    /// Per label: pooled value was clipped (LP pooling only).
    clipped: Vec<bool>,
}

fn logit_clamped<T: Real>(p: T) -> T {
    let eps = T::from_f64(PROB_EPS);
    let p = p.clamp(eps, T::ONE - eps);
    (p / (T::ONE - p)).ln()
}

fn forward_impl<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    want_trace: bool,
) -> Result<(BagPrediction<T>, Option<BagTrace<T>>)> {
    cfg.validate()?;
    bag.validate()?;
    if bag.labels.len() != cfg.num_labels {
        return Err(CoreError::Dimension(format!(
            "bag {} carries {} labels but the model expects {}",
            bag.bag_id,
            bag.labels.len(),
            cfg.num_labels
        )));
    }
    let n = bag.patches.len();
    let mut projected = Vec::with_capacity(n);
    let mut det_traces = Vec::with_capacity(n);
    let mut con_traces = Vec::with_capacity(n);
    let mut fused = Vec::with_capacity(n);
    for patch in &bag.patches {
        if patch.embedding.shape().dim(0) != cfg.embed_dim {
            return Err(CoreError::Dimension(format!(
                "patch embedding has {} channels, expected {}",
                patch.embedding.shape().dim(0),
                cfg.embed_dim
            )));
        }
        let p = project(&patch.embedding, params)?;
        let det = stack_forward(&p, &params.detection)?;
        let con = if cfg.context_enabled {
            Some(stack_forward(&p, &params.context)?)
        } else {
            None
        };
        let det_map = Heatmap::new(det.raw.clone())?;
        let con_map = con.as_ref().map(|c| Heatmap { values: c.raw.clone() });
        let h = fuse(&det_map, con_map.as_ref())?;
        projected.push(p);
        det_traces.push(det);
        con_traces.push(con);
        fused.push(h.values);
    }

    let refs: Vec<(&Tensor<T>, u32, u32)> = fused
        .iter()
        .zip(bag.patches.iter())
        .map(|(t, p)| (t, p.row, p.col))
        .collect();
    let (full, coverage) = stitch(&refs)?;
    let (h, w) = (full.shape().dim(1), full.shape().dim(2));
    let covered_cells: Vec<usize> =
        (0..h * w).filter(|&i| coverage.data[i] != 0).collect();

    let plane = h * w;
    let mut masked_full = full.clone();
    let mut y_hat = Vec::with_capacity(cfg.num_labels);
    let mut z = Vec::with_capacity(cfg.num_labels);
    let mut thresholds = Vec::with_capacity(cfg.num_labels);
    let mut masked_values = Vec::with_capacity(cfg.num_labels);
    let mut argmax = vec![0usize; cfg.num_labels];
    let mut clipped = vec![false; cfg.num_labels];

    for c in 0..cfg.num_labels {
        let channel = &full.data()[c * plane..(c + 1) * plane];
        let mut vals: Vec<T> = covered_cells.iter().map(|&i| channel[i]).collect();
        let otsu = if cfg.threshold_enabled {
            let r = otsu_threshold(&vals, cfg.otsu_bins)?;
            if !r.degenerate {
                for v in vals.iter_mut() {
                    if *v <= r.threshold {
                        *v = T::ZERO;
                    }
                }
            }
            Some(r)
        } else {
            None
        };
        // Mirror the masking into the reported heatmap.
        for (slot, &cell) in covered_cells.iter().enumerate() {
            masked_full.data_mut()[c * plane + cell] = vals[slot];
        }
        let pooled = match cfg.pooling_mode {
            PoolingMode::SmoothMax => smoothmax_pool(&vals, cfg.alpha)?,
            PoolingMode::Max => {
                let (v, i) = max_pool(&vals)?;
                argmax[c] = i;
                v
            }
            PoolingMode::Lp => {
                let raw = lp_pool(&vals, cfg.lp_p)?;
                let lo = T::from_f64(LP_CLIP);
                let hi = T::ONE - lo;
                if raw < lo || raw > hi {
                    clipped[c] = true;
                }
                raw.clamp(lo, hi)
            }
        };
        y_hat.push(pooled);
        z.push(logit_clamped(pooled));
        thresholds.push(otsu);
        masked_values.push(vals);
    }

    let prediction = BagPrediction {
        y_hat,
        z,
        full_heatmap: Heatmap { values: full },
        masked_heatmap: Heatmap { values: masked_full },
        thresholds,
        coverage,
    };
    let trace = want_trace.then_some(BagTrace {
        projected,
        det: det_traces,
        con: con_traces,
        fused,
        covered_cells,
        masked_values,
        argmax,
        clipped,
    });
    Ok((prediction, trace))
}

/// Run the full pipeline on one bag.
pub fn forward_bag<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<BagPrediction<T>> {
    Ok(forward_impl(bag, params, cfg, false)?.0)
}

/// Like [`forward_bag`] but also returns the intermediates needed by
/// [`backward_bag`].
pub fn forward_bag_traced<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
) -> Result<(BagPrediction<T>, BagTrace<T>)> {
    let (pred, trace) = forward_impl(bag, params, cfg, true)?;
    Ok((pred, trace.expect("trace requested")))
}

/// Stitched-grid geometry of a traced bag.
fn grid_geometry<T: Real>(bag: &BagOfPatches<T>, trace: &BagTrace<T>) -> (usize, usize, usize, usize) {
    let first_fused = trace.fused.first().expect("traced bag has patches");
    let (ph, pw) = (first_fused.shape().dim(1), first_fused.shape().dim(2));
    let max_row = bag.patches.iter().map(|p| p.row).max().unwrap() as usize;
    let max_col = bag.patches.iter().map(|p| p.col).max().unwrap() as usize;
    (ph, pw, (max_row + 1) * ph, (max_col + 1) * pw)
}

/// Pooling gradient scattered back onto the full map. The Otsu mask is a
/// constant here: zeroed entries receive exactly zero gradient.
fn pool_gradient_to_full<T: Real>(
    trace: &BagTrace<T>,
    cfg: &ModelConfig,
    d_y_hat: &[T],
    plane: usize,
) -> Result<Vec<T>> {
    let mut d_full = vec![T::ZERO; cfg.num_labels * plane];
    for c in 0..cfg.num_labels {
        let dy = if trace.clipped[c] { T::ZERO } else { d_y_hat[c] };
        if dy == T::ZERO {
            continue;
        }
        let vals = &trace.masked_values[c];
        let d_vals: Vec<T> = match cfg.pooling_mode {
            PoolingMode::SmoothMax => smoothmax_backward(vals, cfg.alpha, dy)?,
            PoolingMode::Max => max_pool_backward(vals.len(), trace.argmax[c], dy),
            PoolingMode::Lp => lp_pool_backward(vals, cfg.lp_p, dy)?,
        };
        for (slot, &cell) in trace.covered_cells.iter().enumerate() {
            if vals[slot] > T::ZERO {
                d_full[c * plane + cell] = d_vals[slot];
            }
        }
    }
    Ok(d_full)
}

/// Fusion backward for one patch: gradients w.r.t. the raw detection and
/// context maps given the full-map gradient.
fn fuse_backward_patch<T: Real>(
    trace: &BagTrace<T>,
    patch_idx: usize,
    d_full: &[T],
    cfg: &ModelConfig,
    origin: (usize, usize),
    grid_width: usize,
    patch_extent: (usize, usize),
    plane: usize,
) -> (Tensor<T>, Tensor<T>) {
    let (oy, ox) = origin;
    let w = grid_width;
    let (ph, pw) = patch_extent;
    let fused = &trace.fused[patch_idx];
    let det_raw = &trace.det[patch_idx].raw;
    let con = trace.con[patch_idx].as_ref();
    let mut d_det_raw = Tensor::zeros(det_raw.shape());
    let mut d_con_raw = Tensor::zeros(det_raw.shape());
    for c in 0..cfg.num_labels {
        for y in 0..ph {
            for x in 0..pw {
                let g = d_full[c * plane + (oy + y) * w + (ox + x)];
                if g == T::ZERO {
                    continue;
                }
                let idx = fused.idx3(c, y, x);
                let h_val = fused.data()[idx];
                let d_u = g * h_val * (T::ONE - h_val);
                match con {
                    Some(con_trace) => {
                        let s = sigmoid_scalar(con_trace.raw.data()[idx]);
                        d_det_raw.data_mut()[idx] = d_u * (T::ONE - s);
                        d_con_raw.data_mut()[idx] =
                            -(d_u * det_raw.data()[idx]) * s * (T::ONE - s);
                    }
                    None => d_det_raw.data_mut()[idx] = d_u,
                }
            }
        }
    }
    (d_det_raw, d_con_raw)
}

/// Reverse sweep: accumulates parameter gradients for `d_y_hat` = dL/d y_hat.
///
/// The Otsu mask is treated as a constant, so gradients flow only through
/// kept entries; zeroed entries contribute exactly nothing.
pub fn backward_bag<T: Real>(
    bag: &BagOfPatches<T>,
    trace: &BagTrace<T>,
    params: &mut ModelParams<T>,
    cfg: &ModelConfig,
    d_y_hat: &[T],
) -> Result<()> {
    if d_y_hat.len() != cfg.num_labels {
        return Err(CoreError::Dimension(format!(
            "gradient has {} entries for {} labels",
            d_y_hat.len(),
            cfg.num_labels
        )));
    }
    let (ph, pw, h, w) = grid_geometry(bag, trace);
    let plane = h * w;
    let d_full = pool_gradient_to_full(trace, cfg, d_y_hat, plane)?;

    for (i, patch) in bag.patches.iter().enumerate() {
        let oy = patch.row as usize * ph;
        let ox = patch.col as usize * pw;
        let (d_det_raw, d_con_raw) =
            fuse_backward_patch(trace, i, &d_full, cfg, (oy, ox), w, (ph, pw), plane);
        let mut d_proj =
            stack_backward(&mut params.detection, &trace.det[i], &trace.projected[i], &d_det_raw)?;
        if let Some(con_trace) = &trace.con[i] {
            let d_proj_con =
                stack_backward(&mut params.context, con_trace, &trace.projected[i], &d_con_raw)?;
            d_proj.add_assign(&d_proj_con)?;
        }
        params.projection.backward(&patch.embedding, &d_proj)?;
    }
    Ok(())
}

/// Gradient of one pooled probability with respect to the projected feature
/// maps, one tensor per patch. Caller-visible parameter gradients are left
/// untouched; used by the saliency baseline.
pub fn backward_to_projection<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    label: usize,
) -> Result<Vec<Tensor<T>>> {
    if label >= cfg.num_labels {
        return Err(CoreError::Argument(format!(
            "label {label} out of range for {} labels",
            cfg.num_labels
        )));
    }
    let (_, trace) = forward_bag_traced(bag, params, cfg)?;
    let mut scratch = params.clone();
    let mut d_y = vec![T::ZERO; cfg.num_labels];
    d_y[label] = T::ONE;

    let (ph, pw, h, w) = grid_geometry(bag, &trace);
    let plane = h * w;
    let d_full = pool_gradient_to_full(&trace, cfg, &d_y, plane)?;

    let mut out = Vec::with_capacity(bag.patches.len());
    for (i, patch) in bag.patches.iter().enumerate() {
        let oy = patch.row as usize * ph;
        let ox = patch.col as usize * pw;
        let (d_det_raw, d_con_raw) =
            fuse_backward_patch(&trace, i, &d_full, cfg, (oy, ox), w, (ph, pw), plane);
        let mut d_proj = stack_backward(
            &mut scratch.detection,
            &trace.det[i],
            &trace.projected[i],
            &d_det_raw,
        )?;
        if let Some(con_trace) = &trace.con[i] {
            let d_proj_con = stack_backward(
                &mut scratch.context,
                con_trace,
                &trace.projected[i],
                &d_con_raw,
            )?;
            d_proj.add_assign(&d_proj_con)?;
        }
        out.push(d_proj);
    }
    Ok(out)
}

/// Projected feature maps for every patch of a bag (saliency input).
pub fn project_bag<T: Real>(
    bag: &BagOfPatches<T>,
    params: &ModelParams<T>,
) -> Result<Vec<Tensor<T>>> {
    bag.patches.iter().map(|p| project(&p.embedding, params)).collect()
}
