//! Checkpoint container: magic, header length, JSON header, raw payloads.
//!
//! ```text
//! b"HMLTCKPT" | u64 LE header_len | header JSON (UTF-8) | tensor payloads (LE, header order)
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamRegistry, Real, Result, Tensor, TensorError};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"HMLTCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    tensors: Vec<CheckpointEntry>,
    meta: serde_json::Value,
}

/// A loaded checkpoint: parameters plus free-form metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Real> {
    pub params: ParamRegistry<F>,
    pub meta: serde_json::Value,
}

pub fn encode_checkpoint<F: Real>(params: &ParamRegistry<F>, meta: &serde_json::Value) -> Vec<u8> {
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        dtype: F::DTYPE.to_string(),
        tensors: params
            .iter()
            .map(|p| CheckpointEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                frozen: p.frozen,
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let payload: usize = params.iter().map(|p| p.value.numel() * F::BYTES).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params.iter() {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn decode_checkpoint<F: Real>(bytes: &[u8]) -> Result<Checkpoint<F>> {
    let fmt = |m: &str| TensorError::Format(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| fmt(&e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(fmt(&format!("unsupported version {}", header.format_version)));
    }
    if header.dtype != F::DTYPE {
        return Err(fmt(&format!("dtype {} does not match {}", header.dtype, F::DTYPE)));
    }
    let mut off = 16 + hlen;
    let mut params = ParamRegistry::new();
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let raw = bytes
            .get(off..off + n * F::BYTES)
            .ok_or_else(|| fmt(&format!("truncated payload for {}", e.name)))?;
        let data = raw.chunks_exact(F::BYTES).map(F::read_le).collect();
        off += n * F::BYTES;
        params.add(e.name, Tensor::new(e.shape, data)?, e.frozen)?;
    }
    if off != bytes.len() {
        return Err(fmt("trailing bytes"));
    }
    Ok(Checkpoint {
        params,
        meta: header.meta,
    })
}

pub fn write_checkpoint<F: Real>(path: &Path, params: &ParamRegistry<F>, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode_checkpoint(params, meta))?;
    Ok(())
}

pub fn read_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    decode_checkpoint(&fs::read(path)?)
}
