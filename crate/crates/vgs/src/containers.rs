//! Binary containers for feature matrices and model checkpoints.
//!
//! Two container families cover all on-disk numeric data:
//!
//! - Matrix files: a 4-byte magic (`MFC1` for MFCC sequences, `IMG1` for
//!   image feature vectors), `u32` rows, `u32` cols, then row-major
//!   little-endian `f32` values.
//! - Checkpoints (`VGSM`): magic, `u32` version, `u32` tensor count, then
//!   per tensor a length-prefixed UTF-8 name, `u32` rank, `rank` dims, and
//!   row-major little-endian `f64` values.
//!
//! Readers fail with a byte offset on any structural problem; they never
//! return partially read data.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::{Result, VgsError};

/// Magic for MFCC sequence files.
pub const MAGIC_MFCC: [u8; 4] = *b"MFC1";
/// Magic for image feature files.
pub const MAGIC_IMAGE: [u8; 4] = *b"IMG1";
/// Magic for model checkpoints.
pub const MAGIC_CHECKPOINT: [u8; 4] = *b"VGSM";
/// Checkpoint format version this build reads and writes.
pub const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor inside a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    /// Logical dimensions; empty means a scalar holding one value.
    pub dims: Vec<u32>,
    /// Row-major values; length equals the product of `dims`.
    pub data: Vec<f64>,
}

impl TensorEntry {
    pub fn scalar(name: &str, value: f64) -> Self {
        TensorEntry {
            name: name.to_string(),
            dims: Vec::new(),
            data: vec![value],
        }
    }

    fn element_count(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

/// Byte-slice reader that remembers its position for error reports.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(VgsError::Parse {
            offset: self.pos as u64,
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!(
                "truncated: need {} more bytes, have {}",
                n,
                self.bytes.len() - self.pos
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4)?))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != expected {
            self.pos -= 4;
            return self.fail(format!(
                "bad magic: expected {:?}, found {:?}",
                String::from_utf8_lossy(&expected),
                String::from_utf8_lossy(got)
            ));
        }
        Ok(())
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            Err(VgsError::Parse {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.bytes.len() - self.pos),
            })
        } else {
            Ok(())
        }
    }
}

/// Writes a row-major `f64` matrix as an `f32` container file.
///
/// Values are narrowed to `f32`; callers that need lossless round-trips
/// must quantize to `f32` precision before writing.
pub fn write_matrix(
    path: &Path,
    magic: [u8; 4],
    rows: usize,
    cols: usize,
    data: &[f64],
) -> Result<()> {
    if rows * cols != data.len() {
        return Err(VgsError::Shape(format!(
            "matrix file {}x{} needs {} values, got {}",
            rows,
            cols,
            rows * cols,
            data.len()
        )));
    }
    let mut buf = Vec::with_capacity(12 + data.len() * 4);
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a matrix container, checking the magic, and widens values to `f64`.
pub fn read_matrix(path: &Path, magic: [u8; 4]) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(magic)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| VgsError::Parse {
            offset: 4,
            message: format!("matrix dimensions {rows}x{cols} overflow"),
        })?;
    let raw = r.take(n * 4)?;
    let mut data = vec![0.0f64; n];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        data[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    r.done()?;
    Ok((rows, cols, data))
}

/// Writes a checkpoint holding the given tensors in order.
pub fn write_checkpoint(path: &Path, entries: &[TensorEntry]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC_CHECKPOINT);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for entry in entries {
        if entry.data.len() != entry.element_count() {
            return Err(VgsError::Shape(format!(
                "tensor {} declares dims {:?} ({} values) but holds {}",
                entry.name,
                entry.dims,
                entry.element_count(),
                entry.data.len()
            )));
        }
        let name = entry.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(entry.dims.len() as u32).to_le_bytes());
        for &d in &entry.dims {
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &entry.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a checkpoint, preserving tensor order.
///
/// A version newer than [`CHECKPOINT_VERSION`] is an explicit error rather
/// than a best-effort parse.
pub fn read_checkpoint(path: &Path) -> Result<Vec<TensorEntry>> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    r.magic(MAGIC_CHECKPOINT)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(VgsError::Version {
            what: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name_bytes = r.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| VgsError::Parse {
                offset: (r.pos - name_len) as u64,
                message: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
            .ok_or_else(|| VgsError::Parse {
                offset: r.pos as u64,
                message: format!("tensor {name} dims {dims:?} overflow"),
            })?;
        let raw = r.take(n * 8)?;
        let mut data = vec![0.0f64; n];
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            data[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        entries.push(TensorEntry { name, dims, data });
    }
    r.done()?;
    Ok(entries)
}
