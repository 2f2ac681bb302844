//! Dataset directories: IEB1 bags per split, PGM mask exports, and a JSON
//! manifest listing split membership, bag paths, and labels.

use insight_core::bag::BagOfPatches;
use insight_core::synth::SynthDataset;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{AppError, Result};
use crate::formats::{atomic_write, ieb1, pgm};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Bag file path relative to the manifest.
    pub bag: String,
    pub labels: Vec<u8>,
    pub has_mask: bool,
    /// Per-label PGM mask paths (present for bags carrying masks).
    #[serde(default)]
    pub mask_files: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub embed_dim: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    pub num_labels: usize,
    pub splits: BTreeMap<String, Vec<ManifestEntry>>,
}

/// Refuse to clobber pre-existing content unless forced.
pub fn ensure_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)
            .map_err(|e| AppError::io(dir, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(AppError::Usage(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    Ok(())
}

/// Write all three splits plus masks and the manifest.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<Manifest> {
    let first = data
        .train
        .first()
        .ok_or_else(|| AppError::Data("dataset has no training bags".into()))?;
    let shape = first.patches[0].embedding.shape();
    let mut manifest = Manifest {
        format: "insight-dataset".into(),
        version: 1,
        embed_dim: shape.dim(0),
        patch_h: shape.dim(1),
        patch_w: shape.dim(2),
        num_labels: first.labels.len(),
        splits: BTreeMap::new(),
    };
    for (split, bags) in
        [("train", &data.train), ("val", &data.val), ("test", &data.test)]
    {
        let split_dir = dir.join(split);
        std::fs::create_dir_all(&split_dir).map_err(|e| AppError::io(&split_dir, e))?;
        let mut entries = Vec::with_capacity(bags.len());
        for bag in bags {
            let rel_bag = format!("{split}/{}.ieb", bag.bag_id);
            ieb1::write_bag(&dir.join(&rel_bag), bag)?;
            let mut mask_files = Vec::new();
            if let Some(masks) = &bag.masks {
                let mask_dir = dir.join("masks").join(split);
                std::fs::create_dir_all(&mask_dir).map_err(|e| AppError::io(&mask_dir, e))?;
                for (c, plane) in masks.planes.iter().enumerate() {
                    let rel = format!("masks/{split}/{}.l{c}.pgm", bag.bag_id);
                    pgm::write_mask(&dir.join(&rel), plane)?;
                    mask_files.push(rel);
                }
            }
            entries.push(ManifestEntry {
                bag: rel_bag,
                labels: bag.labels.clone(),
                has_mask: bag.masks.is_some(),
                mask_files,
            });
        }
        manifest.splits.insert(split.to_string(), entries);
    }
    let json = serde_json::to_vec_pretty(&manifest)
        .map_err(|e| AppError::Data(format!("manifest serialization: {e}")))?;
    atomic_write(&dir.join(MANIFEST_NAME), &json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = std::fs::read(&path).map_err(|e| AppError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| AppError::format(&path, e.column() as u64, e.to_string()))?;
    if manifest.format != "insight-dataset" {
        return Err(AppError::format(&path, 0, format!("unknown format {}", manifest.format)));
    }
    Ok(manifest)
}

/// Load every bag of one split.
pub fn load_split(dir: &Path, manifest: &Manifest, split: &str) -> Result<Vec<BagOfPatches<f32>>> {
    let entries = manifest
        .splits
        .get(split)
        .ok_or_else(|| AppError::Usage(format!("manifest has no split named {split}")))?;
    let mut bags = Vec::with_capacity(entries.len());
    for entry in entries {
        let bag = ieb1::read_bag(&dir.join(&entry.bag))?;
        if bag.labels != entry.labels {
            return Err(AppError::Data(format!(
                "{}: labels in the bag file disagree with the manifest",
                entry.bag
            )));
        }
        bags.push(bag);
    }
    Ok(bags)
}

/// Recursively fingerprint a directory (paths + contents); used by tests to
/// assert reruns are byte-identical and inputs untouched.
pub fn dir_digest(dir: &Path) -> Result<u64> {
    fn walk(dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        for entry in std::fs::read_dir(dir).map_err(|e| AppError::io(dir, e))? {
            let entry = entry.map_err(|e| AppError::io(dir, e))?;
            let path = entry.path();
            if path.is_dir() {
                walk(&path, files)?;
            } else {
                files.push(path);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, &mut files)?;
    files.sort();
    // FNV-1a over root-relative paths and contents.
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x1000_0000_01b3);
        }
    };
    for f in &files {
        let rel = f.strip_prefix(dir).unwrap_or(f);
        eat(rel.to_string_lossy().as_bytes());
        eat(&std::fs::read(f).map_err(|e| AppError::io(f, e))?);
    }
    Ok(hash)
}
