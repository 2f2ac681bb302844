//! Binary file formats. Byte layouts are documented in FORMATS.md at the
//! repository root; every multi-byte integer is little-endian and every real
//! is a 32-bit float regardless of compute precision.

pub mod checkpoint;
pub mod ieb1;
pub mod pgm;

use crate::error::{AppError, Result};
use std::io::Read;
use std::path::{Path, PathBuf};

/// Reader wrapper that tracks the byte offset for format errors.
pub(crate) struct Cursor<R> {
    inner: R,
    path: PathBuf,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    pub fn new(inner: R, path: &Path) -> Self {
        Cursor { inner, path: path.to_path_buf(), offset: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(AppError::format(&self.path, self.offset, message))
    }

    pub fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Err(AppError::format(
                &self.path,
                self.offset,
                format!("truncated file while reading {what}"),
            )),
            Err(e) => Err(AppError::io(&self.path, e)),
        }
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.read_exact(&mut b, what)?;
        Ok(b[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }


    pub fn f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut bytes = vec![0u8; n * 4];
        self.read_exact(&mut bytes, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Error out if any bytes remain.
    pub fn expect_eof(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe) {
            Ok(0) => Ok(()),
            Ok(_) => self.fail("trailing bytes after the end of the payload"),
            Err(e) => Err(AppError::io(&self.path, e)),
        }
    }
}

/// Write a file atomically: contents land under a temporary name in the
/// same directory and are renamed into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let file_name = path
        .file_name()
        .ok_or_else(|| AppError::Usage(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    std::fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))?;
    Ok(())
}
