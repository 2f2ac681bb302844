//! The "IEB1" embedding-bag container (see FORMATS.md).

use insight_core::bag::{BagOfPatches, Patch};
use insight_core::mask::{BinaryMask, MaskStack};
use insight_core::tensor::{Shape, Tensor};
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{atomic_write, Cursor};
use crate::error::{AppError, Result};

pub const MAGIC: &[u8; 4] = b"IEB1";
pub const VERSION: u16 = 1;

/// Serialize a bag to the IEB1 byte layout.
pub fn encode_bag(bag: &BagOfPatches<f32>) -> Result<Vec<u8>> {
    bag.validate().map_err(AppError::from)?;
    let first = &bag.patches[0].embedding;
    let (embed_dim, ph, pw) =
        (first.shape().dim(0), first.shape().dim(1), first.shape().dim(2));
    let num_labels = bag.labels.len();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let id_bytes = bag.bag_id.as_bytes();
    if id_bytes.len() > u16::MAX as usize {
        return Err(AppError::Data(format!("bag id of {} bytes is too long", id_bytes.len())));
    }
    out.extend_from_slice(&(id_bytes.len() as u16).to_le_bytes());
    out.extend_from_slice(id_bytes);
    out.extend_from_slice(&(embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(ph as u32).to_le_bytes());
    out.extend_from_slice(&(pw as u32).to_le_bytes());
    out.extend_from_slice(&(num_labels as u32).to_le_bytes());
    let mut label_bits = vec![0u8; num_labels.div_ceil(8)];
    for (c, &l) in bag.labels.iter().enumerate() {
        if l != 0 {
            label_bits[c >> 3] |= 1 << (c & 7);
        }
    }
    out.extend_from_slice(&label_bits);
    out.extend_from_slice(&(bag.patches.len() as u32).to_le_bytes());
    for patch in &bag.patches {
        out.extend_from_slice(&patch.row.to_le_bytes());
        out.extend_from_slice(&patch.col.to_le_bytes());
        for &v in patch.embedding.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    match &bag.masks {
        None => out.push(0),
        Some(stack) => {
            out.push(1);
            let (mh, mw) = stack.extents().unwrap_or((0, 0));
            out.extend_from_slice(&(mh as u32).to_le_bytes());
            out.extend_from_slice(&(mw as u32).to_le_bytes());
            for plane in &stack.planes {
                out.extend_from_slice(&plane.data);
            }
        }
    }
    Ok(out)
}

pub fn write_bag(path: &Path, bag: &BagOfPatches<f32>) -> Result<()> {
    atomic_write(path, &encode_bag(bag)?)
}

pub fn read_bag(path: &Path) -> Result<BagOfPatches<f32>> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut r = Cursor::new(BufReader::new(file), path);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic, "magic")?;
    if &magic != MAGIC {
        return r.fail(format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}, expected {VERSION}"));
    }
    let id_len = r.u16("bag id length")? as usize;
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes, "bag id")?;
    let bag_id = String::from_utf8(id_bytes)
        .map_err(|_| AppError::format(path, r.offset(), "bag id is not valid UTF-8"))?;

    let embed_dim = r.u32("embed_dim")? as usize;
    let ph = r.u32("patch height")? as usize;
    let pw = r.u32("patch width")? as usize;
    let num_labels = r.u32("label count")? as usize;
    if embed_dim == 0 || ph == 0 || pw == 0 || num_labels == 0 {
        return r.fail("zero extent in header");
    }
    let mut label_bits = vec![0u8; num_labels.div_ceil(8)];
    r.read_exact(&mut label_bits, "label bits")?;
    let labels: Vec<u8> =
        (0..num_labels).map(|c| (label_bits[c >> 3] >> (c & 7)) & 1).collect();

    let patch_count = r.u32("patch count")? as usize;
    if patch_count == 0 {
        return r.fail("bag holds no patches");
    }
    let mut patches = Vec::with_capacity(patch_count);
    for i in 0..patch_count {
        let row = r.u32("patch row")?;
        let col = r.u32("patch col")?;
        let data = r.f32_vec(embed_dim * ph * pw, "patch embedding")?;
        let embedding = Tensor::from_vec(Shape::d3(embed_dim, ph, pw), data)
            .map_err(|e| AppError::format(path, r.offset(), e.to_string()))?;
        patches.push(Patch { embedding, row, col });
        let _ = i;
    }

    let masks = match r.u8("mask flag")? {
        0 => None,
        1 => {
            let mh = r.u32("mask height")? as usize;
            let mw = r.u32("mask width")? as usize;
            let mut planes = Vec::with_capacity(num_labels);
            for _ in 0..num_labels {
                let mut data = vec![0u8; mh * mw];
                r.read_exact(&mut data, "mask plane")?;
                let plane = BinaryMask::from_data(mh, mw, data)
                    .map_err(|e| AppError::format(path, r.offset(), e.to_string()))?;
                planes.push(plane);
            }
            Some(
                MaskStack::new(planes)
                    .map_err(|e| AppError::format(path, r.offset(), e.to_string()))?,
            )
        }
        other => return r.fail(format!("mask flag must be 0 or 1, got {other}")),
    };
    r.expect_eof()?;

    let bag = BagOfPatches { bag_id, patches, labels, masks };
    // Layout and invariant violations are data errors, not format errors,
    // but they must never escape the reader.
    bag.validate().map_err(AppError::from)?;
    Ok(bag)
}
