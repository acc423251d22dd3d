//! Binary container for named tensor payloads.
//!
//! Layout: 8-byte magic, u64 little-endian manifest length, JSON manifest,
//! then all payloads back to back. Payloads are raw little-endian f32. The
//! manifest carries a caller-supplied `meta` object plus one entry per
//! tensor: name, shape, byte offset into the payload area, and a crc32 so a
//! truncated or bit-flipped file is rejected instead of silently loaded.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::Tensor;

pub const MAGIC: &[u8; 8] = b"PFXTNSR1";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a tensor container (bad magic)")]
    BadMagic,
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("payload shorter than manifest entry {name} requires")]
    Truncated { name: String },
    #[error("checksum mismatch for tensor {name}")]
    ChecksumMismatch { name: String },
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
    crc32: u32,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Debug, Clone)]
pub struct LoadedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn write_container<W: Write>(
    w: &mut W,
    meta: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<(), StoreError> {
    let mut payload: Vec<u8> = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = payload.len() as u64;
        let start = payload.len();
        for v in t.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let (rows, cols) = t.shape();
        entries.push(Entry { name: name.clone(), rows, cols, offset, crc32: crc32(&payload[start..]) });
    }
    let manifest = serde_json::to_vec(&Manifest { meta, tensors: entries })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn read_container<R: Read>(r: &mut R) -> Result<(serde_json::Value, Vec<LoadedTensor>), StoreError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in manifest.tensors {
        let bytes = e.rows * e.cols * 4;
        let start = e.offset as usize;
        let slice = payload
            .get(start..start + bytes)
            .ok_or_else(|| StoreError::Truncated { name: e.name.clone() })?;
        if crc32(slice) != e.crc32 {
            return Err(StoreError::ChecksumMismatch { name: e.name });
        }
        let data = slice
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(LoadedTensor { name: e.name, rows: e.rows, cols: e.cols, data });
    }
    Ok((manifest.meta, out))
}

/// Plain IEEE crc32, table-free (the payloads are small enough that the
/// bitwise loop is not worth optimizing).
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for b in bytes {
        crc ^= *b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}
