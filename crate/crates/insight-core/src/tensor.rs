//! Dense tensors and the four differentiable primitives the model is built
//! from: same-padding convolution, GELU, per-site layer normalization, and a
//! numerically guarded sigmoid.
//!
//! There is no tape. Each primitive exposes an explicit backward that the
//! model composes by hand, which keeps the chain rule inspectable and lets
//! the finite-difference oracle check every piece in isolation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::real::Real;

/// Extents of a tensor, rank 1 to 4, row-major with the last axis fastest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 4],
    rank: usize,
}

impl Shape {
    pub fn d1(a: usize) -> Self {
        Shape { dims: [a, 1, 1, 1], rank: 1 }
    }
    pub fn d2(a: usize, b: usize) -> Self {
        Shape { dims: [a, b, 1, 1], rank: 2 }
    }
    pub fn d3(a: usize, b: usize, c: usize) -> Self {
        Shape { dims: [a, b, c, 1], rank: 3 }
    }
    pub fn d4(a: usize, b: usize, c: usize, d: usize) -> Self {
        Shape { dims: [a, b, c, d], rank: 4 }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank]
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.dims[axis]
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl core::fmt::Display for Shape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:?}", self.dims())
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor { shape, data: vec![T::ZERO; shape.len()] }
    }

    pub fn filled(shape: Shape, value: T) -> Self {
        Tensor { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(CoreError::Dimension(format!(
                "shape {shape} holds {} elements but {} values were given",
                shape.len(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Flat index into a rank-3 tensor laid out as (c, h, w).
    #[inline]
    pub fn idx3(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.shape.dim(1) + y) * self.shape.dim(2) + x
    }

    #[inline]
    pub fn at3(&self, c: usize, y: usize, x: usize) -> T {
        self.data[self.idx3(c, y, x)]
    }

    pub fn fill(&mut self, value: T) {
        for v in &mut self.data {
            *v = value;
        }
    }

    pub fn scale(&mut self, factor: T) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// Elementwise accumulate; shapes must match exactly.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(CoreError::Dimension(format!(
                "cannot accumulate {} into {}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
        Ok(())
    }

    /// Reinterpret in a different precision.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Error out if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        for (i, v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "{context}: element {i} of shape {} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }
}

/// A value tensor with an additively accumulated gradient buffer of the same
/// shape.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> GradPair<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        GradPair { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::ZERO);
    }

    pub fn cast<U: Real>(&self) -> GradPair<U> {
        GradPair { value: self.value.cast(), grad: self.grad.cast() }
    }
}

/// Convolution parameters: stride is fixed at 1 and padding must preserve
/// spatial extents, so the kernel size is always odd.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub padding: usize,
}

impl<T: Real> ConvLayer<T> {
    /// Kernel shaped (out_ch, in_ch, k, k); bias shaped (out_ch).
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if kernel.shape().rank() != 4 {
            return Err(CoreError::Dimension(format!(
                "conv kernel must be rank 4, got {}",
                kernel.shape()
            )));
        }
        let k = kernel.shape().dim(2);
        if k != kernel.shape().dim(3) {
            return Err(CoreError::Config(format!(
                "conv kernel must be square, got {}",
                kernel.shape()
            )));
        }
        if k % 2 == 0 {
            return Err(CoreError::Config(format!("conv kernel size must be odd, got {k}")));
        }
        if bias.shape().dims() != [kernel.shape().dim(0)] {
            return Err(CoreError::Dimension(format!(
                "conv bias shape {} does not match {} output channels",
                bias.shape(),
                kernel.shape().dim(0)
            )));
        }
        let padding = (k - 1) / 2;
        Ok(ConvLayer { kernel, bias, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape().dim(0)
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape().dim(1)
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape().dim(2)
    }
}

/// Same-padding 2-D convolution of a (c_in, h, w) input.
pub fn conv2d<T: Real>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv2d_raw(input, &layer.kernel, Some(&layer.bias), layer.padding)
}

pub(crate) fn conv2d_raw<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.shape().rank() != 3 {
        return Err(CoreError::Dimension(format!(
            "conv input must be rank 3 (c,h,w), got {}",
            input.shape()
        )));
    }
    let (c_in, h, w) = (input.shape().dim(0), input.shape().dim(1), input.shape().dim(2));
    let (c_out, kc_in, k) = (kernel.shape().dim(0), kernel.shape().dim(1), kernel.shape().dim(2));
    if k % 2 == 0 {
        return Err(CoreError::Config(format!("conv kernel size must be odd, got {k}")));
    }
    if kc_in != c_in {
        return Err(CoreError::Dimension(format!(
            "conv expects {kc_in} input channels, got {c_in}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(CoreError::Dimension("conv input has empty spatial extents".into()));
    }
    let mut out = Tensor::zeros(Shape::d3(c_out, h, w));
    let plane = h * w;
    if k == 1 {
        // Pointwise convolution: a per-site channel mix.
        for co in 0..c_out {
            let out_plane = &mut out.data[co * plane..(co + 1) * plane];
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for ci in 0..c_in {
                let wgt = kernel.data[co * c_in + ci];
                let in_plane = &input.data[ci * plane..(ci + 1) * plane];
                for (o, &v) in out_plane.iter_mut().zip(in_plane) {
                    *o += wgt * v;
                }
            }
        }
    } else {
        // Materialize shifted planes once (im2col), then accumulate whole
        // contiguous planes per kernel tap.
        let cols = shifted_planes(input, k, padding);
        let taps = c_in * k * k;
        for co in 0..c_out {
            let out_plane = &mut out.data[co * plane..(co + 1) * plane];
            if let Some(b) = bias {
                out_plane.fill(b.data()[co]);
            }
            for r in 0..taps {
                let wgt = kernel.data[co * taps + r];
                let col = &cols[r * plane..(r + 1) * plane];
                for (o, &v) in out_plane.iter_mut().zip(col) {
                    *o += wgt * v;
                }
            }
        }
    }
    out.ensure_finite("conv2d output")?;
    Ok(out)
}

/// im2col for same-padding stride-1 convolution: row (ci*k + ky)*k + kx
/// holds the input plane of channel ci shifted by (ky - p, kx - p), with
/// zeros where the shift leaves the image.
fn shifted_planes<T: Real>(input: &Tensor<T>, k: usize, padding: usize) -> Vec<T> {
    let (c_in, h, w) = (input.shape.dim(0), input.shape.dim(1), input.shape.dim(2));
    let plane = h * w;
    let p = padding as isize;
    let mut cols = vec![T::ZERO; c_in * k * k * plane];
    for ci in 0..c_in {
        for ky in 0..k {
            let dy = ky as isize - p;
            let y0 = (-dy).max(0) as usize;
            let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
            for kx in 0..k {
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                let r = (ci * k + ky) * k + kx;
                let col = &mut cols[r * plane..(r + 1) * plane];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let ix0 = (x0 as isize + dx) as usize;
                    let ix1 = (x1 as isize + dx) as usize;
                    col[y * w + x0..y * w + x1].copy_from_slice(
                        &input.data[ci * plane + iy * w + ix0..ci * plane + iy * w + ix1],
                    );
                }
            }
        }
    }
    cols
}

/// Gradients of a same-padding convolution with respect to input, kernel,
/// and bias given the output gradient.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    padding: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c_in, h, w) = (input.shape().dim(0), input.shape().dim(1), input.shape().dim(2));
    let (c_out, k) = (kernel.shape().dim(0), kernel.shape().dim(2));
    if d_out.shape() != Shape::d3(c_out, h, w) {
        return Err(CoreError::Dimension(format!(
            "conv backward expects output gradient {}, got {}",
            Shape::d3(c_out, h, w),
            d_out.shape()
        )));
    }
    let p = padding as isize;
    let plane = h * w;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_kernel = Tensor::zeros(kernel.shape());
    let mut d_bias = Tensor::zeros(Shape::d1(c_out));

    if k == 1 {
        for co in 0..c_out {
            let g_plane = &d_out.data[co * plane..(co + 1) * plane];
            let mut bias_acc = T::ZERO;
            for &g in g_plane {
                bias_acc += g;
            }
            d_bias.data[co] = bias_acc;
            for ci in 0..c_in {
                let in_plane = &input.data[ci * plane..(ci + 1) * plane];
                let di_plane = &mut d_input.data[ci * plane..(ci + 1) * plane];
                let wgt = kernel.data[co * c_in + ci];
                let mut k_acc = T::ZERO;
                for ((di, &g), &v) in di_plane.iter_mut().zip(g_plane).zip(in_plane) {
                    *di += wgt * g;
                    k_acc += g * v;
                }
                d_kernel.data[co * c_in + ci] += k_acc;
            }
        }
        return Ok((d_input, d_kernel, d_bias));
    }

    // d_kernel via contiguous dots against the shifted planes, d_input by
    // accumulating tap gradients into a column buffer and scattering back.
    let cols = shifted_planes(input, k, padding);
    let taps = c_in * k * k;
    let mut d_cols = vec![T::ZERO; taps * plane];
    for co in 0..c_out {
        let g_plane = &d_out.data[co * plane..(co + 1) * plane];
        let mut bias_acc = T::ZERO;
        for &g in g_plane {
            bias_acc += g;
        }
        d_bias.data[co] = bias_acc;
        for r in 0..taps {
            let wgt = kernel.data[co * taps + r];
            let col = &cols[r * plane..(r + 1) * plane];
            let d_col = &mut d_cols[r * plane..(r + 1) * plane];
            let mut k_acc = T::ZERO;
            for ((dc, &g), &v) in d_col.iter_mut().zip(g_plane).zip(col) {
                *dc += wgt * g;
                k_acc += g * v;
            }
            d_kernel.data[co * taps + r] += k_acc;
        }
    }
    // Scatter (col2im): d_input[ci][y + dy][x + dx] += d_cols[r][y][x].
    for ci in 0..c_in {
        let di_plane = &mut d_input.data[ci * plane..(ci + 1) * plane];
        for ky in 0..k {
            let dy = ky as isize - p;
            let y0 = (-dy).max(0) as usize;
            let y1 = (h as isize - dy).clamp(0, h as isize) as usize;
            for kx in 0..k {
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
                if x0 >= x1 {
                    continue;
                }
                let r = (ci * k + ky) * k + kx;
                let d_col = &d_cols[r * plane..(r + 1) * plane];
                for y in y0..y1 {
                    let iy = (y as isize + dy) as usize;
                    let ix0 = (x0 as isize + dx) as usize;
                    let ix1 = (x1 as isize + dx) as usize;
                    let drow = &d_col[y * w + x0..y * w + x1];
                    let dirow = &mut di_plane[iy * w + ix0..iy * w + ix1];
                    for (di, &g) in dirow.iter_mut().zip(drow) {
                        *di += g;
                    }
                }
            }
        }
    }
    Ok((d_input, d_kernel, d_bias))
}

const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.7978845608028654;

fn gelu_scalar<T: Real>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    let coeff = T::from_f64(GELU_COEFF);
    let inner = c * (x + coeff * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::from_f64(SQRT_2_OVER_PI);
    let half = T::from_f64(0.5);
    let coeff = T::from_f64(GELU_COEFF);
    let three = T::from_f64(3.0);
    let inner = c * (x + coeff * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * coeff * x * x)
}

/// Elementwise GELU (tanh approximation).
pub fn gelu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = gelu_scalar(*v);
    }
    out.ensure_finite("gelu output")?;
    Ok(out)
}

/// Input gradient of GELU given the forward input and the output gradient.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape() != d_out.shape() {
        return Err(CoreError::Dimension(format!(
            "gelu backward shapes {} vs {}",
            x.shape(),
            d_out.shape()
        )));
    }
    let mut d_in = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        d_in.data_mut()[i] = d_out.data()[i] * gelu_grad_scalar(x.data()[i]);
    }
    Ok(d_in)
}

/// Epsilon guarding the layer-norm variance.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the channel axis at each spatial site of a
/// (c, h, w) tensor, followed by a per-channel affine gain/shift.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>, shift: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    if x.shape().rank() != 3 || c == 0 {
        return Err(CoreError::Dimension(format!(
            "layer_norm input must be rank 3 with c >= 1, got {}",
            x.shape()
        )));
    }
    if gain.shape().dims() != [c] || shift.shape().dims() != [c] {
        return Err(CoreError::Dimension(format!(
            "layer_norm affine parameters must be shaped ({c})"
        )));
    }
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::ONE / T::from_usize(c);
    let mut out = Tensor::zeros(x.shape());
    for y in 0..h {
        for x_ in 0..w {
            let mut mean = T::ZERO;
            for ch in 0..c {
                mean += x.at3(ch, y, x_);
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for ch in 0..c {
                let d = x.at3(ch, y, x_) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();
            for ch in 0..c {
                let norm = (x.at3(ch, y, x_) - mean) * inv_std;
                let idx = out.idx3(ch, y, x_);
                out.data_mut()[idx] = gain.data()[ch] * norm + shift.data()[ch];
            }
        }
    }
    out.ensure_finite("layer_norm output")?;
    Ok(out)
}

/// Gradients of `layer_norm` with respect to input, gain, and shift.
pub fn layer_norm_backward<T: Real>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if x.shape() != d_out.shape() {
        return Err(CoreError::Dimension(format!(
            "layer_norm backward shapes {} vs {}",
            x.shape(),
            d_out.shape()
        )));
    }
    let (c, h, w) = (x.shape().dim(0), x.shape().dim(1), x.shape().dim(2));
    let eps = T::from_f64(LAYER_NORM_EPS);
    let inv_c = T::ONE / T::from_usize(c);
    let mut d_x = Tensor::zeros(x.shape());
    let mut d_gain = Tensor::zeros(gain.shape());
    let mut d_shift = Tensor::zeros(gain.shape());

    for y in 0..h {
        for x_ in 0..w {
            let mut mean = T::ZERO;
            for ch in 0..c {
                mean += x.at3(ch, y, x_);
            }
            mean *= inv_c;
            let mut var = T::ZERO;
            for ch in 0..c {
                let d = x.at3(ch, y, x_) - mean;
                var += d * d;
            }
            var *= inv_c;
            let inv_std = T::ONE / (var + eps).sqrt();

            // d_norm = d_out * gain; reduce for the mean and variance terms.
            let mut sum_dnorm = T::ZERO;
            let mut sum_dnorm_xhat = T::ZERO;
            for ch in 0..c {
                let g = d_out.at3(ch, y, x_);
                let xhat = (x.at3(ch, y, x_) - mean) * inv_std;
                let dnorm = g * gain.data()[ch];
                sum_dnorm += dnorm;
                sum_dnorm_xhat += dnorm * xhat;
                d_gain.data_mut()[ch] += g * xhat;
                d_shift.data_mut()[ch] += g;
            }
            for ch in 0..c {
                let xhat = (x.at3(ch, y, x_) - mean) * inv_std;
                let dnorm = d_out.at3(ch, y, x_) * gain.data()[ch];
                let idx = d_x.idx3(ch, y, x_);
                d_x.data_mut()[idx] =
                    inv_std * (dnorm - inv_c * sum_dnorm - xhat * inv_c * sum_dnorm_xhat);
            }
        }
    }
    Ok((d_x, d_gain, d_shift))
}

/// Numerically guarded logistic function; output is strictly inside (0, 1)
/// for every finite input, in both precisions.
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    let y = if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    };
    y.clamp(T::TINY, T::ONE_BELOW)
}

/// Elementwise sigmoid.
pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    out.ensure_finite("sigmoid output")?;
    Ok(out)
}

/// Input gradient of sigmoid given the forward *output* y = sigmoid(x).
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != d_out.shape() {
        return Err(CoreError::Dimension(format!(
            "sigmoid backward shapes {} vs {}",
            y.shape(),
            d_out.shape()
        )));
    }
    let mut d_in = Tensor::zeros(y.shape());
    for i in 0..y.len() {
        let v = y.data()[i];
        d_in.data_mut()[i] = d_out.data()[i] * v * (T::ONE - v);
    }
    Ok(d_in)
}
