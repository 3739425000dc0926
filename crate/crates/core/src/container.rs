//! Self-describing tensor container used for checkpoints and
//! representation caches.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                              |
//! |--------------|------------------------------------------------------|
//! | 8            | magic `DMAECT01`                                     |
//! | 8            | `u64` header length `H`                              |
//! | H            | UTF-8 JSON header                                    |
//! | rest         | `f32` blobs, concatenated in header `tensors` order |
//!
//! The header is `{"kind": str, "meta": any, "tensors": [{"name", "shape"}]}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DMAECT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainerHeader {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode<S: Scalar>(kind: &str, meta: serde_json::Value, tensors: &[(String, &Tensor<S>)]) -> Result<Vec<u8>> {
    let header = ContainerHeader {
        kind: kind.to_string(),
        meta,
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let body: usize = tensors.iter().map(|(_, t)| t.numel() * 4).sum();
    let mut buf = Vec::with_capacity(16 + json.len() + body);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn decode<S: Scalar>(bytes: &[u8]) -> Result<(ContainerHeader, Vec<(String, Tensor<S>)>)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a tensor container (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format("header length exceeds file size".into()))?;
    let header: ContainerHeader = serde_json::from_slice(&bytes[16..body_start])?;
    let mut offset = body_start;
    let mut out = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if end > bytes.len() {
            return Err(Error::Format(format!("blob {} is truncated", entry.name)));
        }
        let data = bytes[offset..end]
            .chunks_exact(4)
            .map(|b| S::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        out.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last blob",
            bytes.len() - offset
        )));
    }
    Ok((header, out))
}

pub fn write<S: Scalar>(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, &Tensor<S>)],
) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, encode(kind, meta, tensors)?)?;
    Ok(())
}

pub fn read<S: Scalar>(path: &Path) -> Result<(ContainerHeader, Vec<(String, Tensor<S>)>)> {
    let bytes = fs::read(path).map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Hex SHA-256 prefix of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..16]))
}
