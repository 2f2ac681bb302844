//! 8-bit binary PGM (P5) images: ground-truth masks (0 / 255) and grayscale
//! heatmap exports.

use insight_core::mask::BinaryMask;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use super::{atomic_write, Cursor};
use crate::error::{AppError, Result};

/// Encode an 8-bit grayscale image as binary PGM.
pub fn encode_gray(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height {
        return Err(AppError::Data(format!(
            "{} pixels do not fill a {width}x{height} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn write_gray(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    atomic_write(path, &encode_gray(width, height, pixels)?)
}

/// Write a binary mask: foreground 255, background 0.
pub fn write_mask(path: &Path, mask: &BinaryMask) -> Result<()> {
    let pixels: Vec<u8> = mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect();
    write_gray(path, mask.width, mask.height, &pixels)
}

fn read_header_token<R: std::io::Read>(r: &mut Cursor<R>) -> Result<String> {
    // Tokens are separated by whitespace; '#' starts a comment to line end.
    let mut token = String::new();
    loop {
        let b = r.u8("header")?;
        match b {
            b'#' => loop {
                if r.u8("comment")? == b'\n' {
                    break;
                }
            },
            b' ' | b'\t' | b'\r' | b'\n' => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            _ => token.push(b as char),
        }
    }
}

/// Read a grayscale P5 image; returns (width, height, pixels).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| AppError::io(path, e))?;
    let mut r = Cursor::new(BufReader::new(file), path);
    let mut magic = [0u8; 2];
    r.read_exact(&mut magic, "magic")?;
    if &magic != b"P5" {
        return r.fail("not a binary PGM (P5) file");
    }
    let width: usize = read_header_token(&mut r)?
        .parse()
        .map_err(|_| AppError::format(path, r.offset(), "width is not a number"))?;
    let height: usize = read_header_token(&mut r)?
        .parse()
        .map_err(|_| AppError::format(path, r.offset(), "height is not a number"))?;
    let maxval: usize = read_header_token(&mut r)?
        .parse()
        .map_err(|_| AppError::format(path, r.offset(), "maxval is not a number"))?;
    if maxval != 255 {
        return r.fail(format!("maxval must be 255, got {maxval}"));
    }
    if width == 0 || height == 0 {
        return r.fail("image extents must be positive");
    }
    let mut pixels = vec![0u8; width * height];
    r.read_exact(&mut pixels, "pixel payload")?;
    r.expect_eof()?;
    Ok((width, height, pixels))
}

/// Read a mask: pixels must be exactly 0 or 255.
pub fn read_mask(path: &Path) -> Result<BinaryMask> {
    let (width, height, pixels) = read_gray(path)?;
    let mut data = Vec::with_capacity(pixels.len());
    for (i, &v) in pixels.iter().enumerate() {
        match v {
            0 => data.push(0),
            255 => data.push(1),
            other => {
                return Err(AppError::format(
                    path,
                    i as u64,
                    format!("mask pixel {other} is neither 0 nor 255"),
                ))
            }
        }
    }
    BinaryMask::from_data(height, width, data)
        .map_err(|e| AppError::Data(e.to_string()))
}
