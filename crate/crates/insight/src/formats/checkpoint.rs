//! The "INSM" model checkpoint container (see FORMATS.md).
//!
//! Holds the model configuration followed by every parameter tensor in the
//! fixed visit order, as 32-bit little-endian floats. Round-trips are
//! byte-exact for f32 models.

use insight_core::model::{ModelConfig, ModelParams, PoolingMode};
use insight_core::tensor::{GradPair, Tensor};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{atomic_write, Cursor};
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"INSM";
pub const VERSION: u32 = 1;

fn pooling_code(mode: PoolingMode) -> u8 {
    match mode {
        PoolingMode::SmoothMax => 0,
        PoolingMode::Max => 1,
        PoolingMode::Lp => 2,
    }
}

fn pooling_from_code(code: u8) -> Option<PoolingMode> {
    match code {
        0 => Some(PoolingMode::SmoothMax),
        1 => Some(PoolingMode::Max),
        2 => Some(PoolingMode::Lp),
        _ => None,
    }
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.embed_dim,
        config.proj_dim,
        config.hidden_dim,
        config.num_labels,
        config.detection_kernel,
        config.context_kernel,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&config.alpha.to_le_bytes());
    out.extend_from_slice(&(config.otsu_bins as u32).to_le_bytes());
    out.push(pooling_code(config.pooling_mode));
    out.extend_from_slice(&config.lp_p.to_le_bytes());
    out.push(config.context_enabled as u8);
    out.push(config.threshold_enabled as u8);

    let mut tensors: Vec<(String, Vec<u32>, Vec<f32>)> = Vec::new();
    params.for_each(&mut |name, pair: &GradPair<f32>| {
        let dims = pair.value.shape().dims().iter().map(|&d| d as u32).collect();
        tensors.push((name.to_string(), dims, pair.value.data().to_vec()));
    });
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, data) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    atomic_write(path, &encode_checkpoint(config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut r = Cursor::new(BufReader::new(file), path);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return r.fail(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}, expected {VERSION}"));
    }
    let embed_dim = r.u32("embed_dim")? as usize;
    let proj_dim = r.u32("proj_dim")? as usize;
    let hidden_dim = r.u32("hidden_dim")? as usize;
    let num_labels = r.u32("num_labels")? as usize;
    let detection_kernel = r.u32("detection_kernel")? as usize;
    let context_kernel = r.u32("context_kernel")? as usize;
    let alpha = r.f64("alpha")?;
    let otsu_bins = r.u32("otsu_bins")? as usize;
    let pooling = r.u8("pooling_mode")?;
    let pooling_mode = pooling_from_code(pooling)
        .ok_or_else(|| AppError::format(path, r.offset(), format!("unknown pooling code {pooling}")))?;
    let lp_p = r.f64("lp_p")?;
    let context_enabled = r.u8("context_enabled")? != 0;
    let threshold_enabled = r.u8("threshold_enabled")? != 0;
    let config = ModelConfig {
        embed_dim,
        proj_dim,
        hidden_dim,
        num_labels,
        detection_kernel,
        context_kernel,
        alpha,
        otsu_bins,
        pooling_mode,
        lp_p,
        context_enabled,
        threshold_enabled,
    };
    config.validate().map_err(|e| AppError::format(path, r.offset(), e.to_string()))?;

    let tensor_count = r.u32("tensor count")? as usize;
    let mut params = ModelParams::<f32>::zeroed(&config).map_err(AppError::from)?;
    let mut expected = Vec::with_capacity(tensor_count);
    params.for_each(&mut |name, pair: &GradPair<f32>| {
        expected.push((name.to_string(), pair.value.shape()));
    });
    if tensor_count != expected.len() {
        return r.fail(format!(
            "checkpoint holds {tensor_count} tensors, the architecture needs {}",
            expected.len()
        ));
    }
    let mut loaded: Vec<Tensor<f32>> = Vec::with_capacity(tensor_count);
    for (name, shape) in &expected {
        let name_len = r.u32("tensor name length")? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes, "tensor name")?;
        let got_name = String::from_utf8(name_bytes)
            .map_err(|_| AppError::format(path, r.offset(), "tensor name is not UTF-8"))?;
        if got_name != *name {
            return r.fail(format!("expected tensor {name}, found {got_name}"));
        }
        let rank = r.u32("tensor rank")? as usize;
        if rank != shape.rank() {
            return r.fail(format!("tensor {name}: rank {rank}, expected {}", shape.rank()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("tensor extent")? as usize);
        }
        if dims != shape.dims() {
            return r.fail(format!("tensor {name}: extents {dims:?}, expected {:?}", shape.dims()));
        }
        let data = r.f32_vec(shape.len(), "tensor data")?;
        let t = Tensor::from_vec(*shape, data)
            .map_err(|e| AppError::format(path, r.offset(), e.to_string()))?;
        loaded.push(t);
    }
    r.expect_eof()?;

    let mut it = loaded.into_iter();
    params.for_each_mut(&mut |_, pair| {
        pair.value = it.next().expect("counted above");
    });
    Ok((config, params))
}
