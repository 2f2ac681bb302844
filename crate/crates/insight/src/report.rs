//! Evaluation report serialization: the JSON schema plus a flat CSV of
//! per-bag rows for external plotting.

use insight_core::eval::EvalReport;
use std::path::Path;

use crate::error::{AppError, Result};
use crate::formats::atomic_write;

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(report)
        .map_err(|e| AppError::Data(format!("report serialization: {e}")))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| AppError::format(path, e.column() as u64, e.to_string()))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// One CSV row per (bag, label).
pub fn encode_report_csv(report: &EvalReport) -> Vec<u8> {
    let mut out = String::from("bag_id,label,y,y_hat,dice,grad_cam_dice\n");
    for bag in &report.bags {
        for c in 0..report.num_labels {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                csv_field(&bag.bag_id),
                c,
                bag.labels[c],
                bag.y_hat[c],
                opt(bag.dice[c]),
                opt(bag.grad_cam_dice[c]),
            ));
        }
    }
    out.into_bytes()
}

pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    atomic_write(path, &encode_report_csv(report))
}
