//! Sidecar matrix format: `b"SICLFEAT"`, `u32` rows, `u32` cols (all
//! little-endian, 16 bytes total), followed by `rows · cols` `f32` values in
//! row-major order. Several matrices may be concatenated in one file and
//! addressed by byte offset.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SICLFEAT";
pub const HEADER_LEN: usize = 16;

/// `rows × cols` matrix of 32-bit frame features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSeq {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureSeq {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols);
        FeatureSeq { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Appends header and payload to `out`; returns the byte offset written at.
    pub fn encode_into(&self, out: &mut Vec<u8>) -> u64 {
        let offset = out.len() as u64;
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        offset
    }

    pub fn decode_at(bytes: &[u8], offset: u64, path: &Path) -> Result<FeatureSeq> {
        let bad = |msg: String| Error::FeatureFormat { path: path.to_path_buf(), msg };
        let o = offset as usize;
        let header = bytes.get(o..o + HEADER_LEN).ok_or_else(|| bad(format!("offset {offset} past end")))?;
        if &header[..8] != MAGIC {
            return Err(bad(format!("bad magic at offset {offset}")));
        }
        let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
        let start = o + HEADER_LEN;
        let payload = bytes
            .get(start..start + rows * cols * 4)
            .ok_or_else(|| bad(format!("truncated {rows}x{cols} matrix at offset {offset}")))?;
        let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(FeatureSeq { rows, cols, data })
    }
}

/// Writes a single matrix to its own file.
pub fn write_matrix(path: &Path, m: &FeatureSeq) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + m.data.len() * 4);
    m.encode_into(&mut buf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads the matrix at the start of `path`.
pub fn read_matrix(path: &Path) -> Result<FeatureSeq> {
    if !path.exists() {
        return Err(Error::MissingFeatureFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureSeq::decode_at(&bytes, 0, path)
}
