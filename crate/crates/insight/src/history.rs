//! Training history as JSON lines, one record per epoch.

use insight_core::train::EpochRecord;
use std::path::Path;

use crate::error::{AppError, Result};
use crate::formats::atomic_write;

pub fn encode_history(history: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for record in history {
        serde_json::to_writer(&mut out, record)
            .map_err(|e| AppError::Data(format!("history serialization: {e}")))?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    atomic_write(path, &encode_history(history)?)
}

pub fn read_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EpochRecord = serde_json::from_str(line)
            .map_err(|e| AppError::format(path, i as u64, format!("line {}: {e}", i + 1)))?;
        out.push(record);
    }
    Ok(out)
}
