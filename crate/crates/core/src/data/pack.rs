//! Binary tensor pack used for flat-vector datasets.
//!
//! Layout: magic `CDAV1`, `u32` rank, `rank` x `u64` dims, then the float32
//! little-endian payload in row-major order. The first dim indexes samples.
//! Manifest rows reference item `i` of a pack as `file.cdav#i`.

use std::fs;
use std::path::Path;

use super::sample::DataShape;
use crate::error::{CdaError, Result};

pub const MAGIC: &[u8; 5] = b"CDAV1";

#[derive(Clone, Debug, PartialEq)]
pub struct TensorPack {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorPack {
    pub fn item_len(&self) -> usize {
        self.dims[1..].iter().product()
    }

    pub fn len(&self) -> usize {
        self.dims[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn item(&self, index: usize) -> Result<&[f32]> {
        if index >= self.len() {
            return Err(CdaError::Validation(format!(
                "pack index {index} out of range ({} items)",
                self.len()
            )));
        }
        let n = self.item_len();
        Ok(&self.data[index * n..(index + 1) * n])
    }

    pub fn item_shape(&self) -> DataShape {
        match self.dims.as_slice() {
            [_, h, w, c] => DataShape::Image {
                height: *h,
                width: *w,
                channels: *c,
            },
            _ => DataShape::Flat { dim: self.item_len() },
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| CdaError::Validation(format!("tensor pack: {m}"));
        if bytes.len() < 9 || &bytes[..5] != MAGIC {
            return Err(bad("bad magic"));
        }
        let rank = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        if rank != 2 && rank != 4 {
            return Err(bad("rank must be 2 or 4"));
        }
        let header = 9 + 8 * rank;
        if bytes.len() < header {
            return Err(bad("truncated header"));
        }
        let dims: Vec<usize> = bytes[9..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count: usize = dims.iter().product();
        if bytes.len() != header + 4 * count {
            return Err(bad("payload length does not match dims"));
        }
        let data = bytes[header..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn read_pack(path: &Path) -> Result<TensorPack> {
    let bytes = fs::read(path).map_err(|e| CdaError::io(path, e))?;
    TensorPack::from_bytes(&bytes).map_err(|e| CdaError::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn write_pack(path: &Path, pack: &TensorPack) -> Result<()> {
    fs::write(path, pack.to_bytes()).map_err(|e| CdaError::io(path, e))
}

/// `"v.cdav#3"` -> `Some(("v.cdav", 3))`.
pub fn split_index(reference: &str) -> Option<(&str, usize)> {
    let (file, idx) = reference.rsplit_once('#')?;
    Some((file, idx.parse().ok()?))
}

pub fn strip_index(reference: &str) -> &str {
    split_index(reference).map_or(reference, |(f, _)| f)
}
