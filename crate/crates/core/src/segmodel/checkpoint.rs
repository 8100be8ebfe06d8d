//! Model checkpoint blob.
//!
//! Layout: 8-byte magic `ARSPLCKP`, `u32` LE header length, UTF-8 JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{net, ModelError, SegModel};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ARSPLCKP";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    widths: [usize; 3],
    dropout_rate: f64,
    seed: u64,
    step_count: u64,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(model: &SegModel) -> Vec<u8> {
    let header = Header {
        version: CHECKPOINT_VERSION,
        widths: model.widths,
        dropout_rate: model.dropout_rate,
        seed: model.seed,
        step_count: model.step_count,
        tensors: model
            .tensors()
            .map(|(name, shape, _)| TensorEntry {
                name: name.to_string(),
                shape,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(12 + json.len() + 8 * model.parameter_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &model.params {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<SegModel, ModelError> {
    let err = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(err("bad magic"));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| err("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("unsupported version {}", header.version)));
    }
    let expected = net::layout(header.widths);
    if header.tensors.len() != expected.len() {
        return Err(err("tensor count does not match architecture"));
    }
    let mut data = &bytes[12 + hlen..];
    let mut params = Vec::with_capacity(expected.len());
    for ((entry, shape), name) in header.tensors.iter().zip(&expected).zip(net::NAMES) {
        if entry.name != name || &entry.shape != shape {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} {:?} does not match expected {} {:?}",
                entry.name, entry.shape, name, shape
            )));
        }
        let n: usize = shape.iter().product();
        if data.len() < 8 * n {
            return Err(err("truncated tensor data"));
        }
        let (chunk, rest) = data.split_at(8 * n);
        params.push(
            chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<f64>>(),
        );
        data = rest;
    }
    if !data.is_empty() {
        return Err(err("trailing bytes"));
    }
    super::check_dropout(header.dropout_rate)?;
    let model = SegModel {
        widths: header.widths,
        dropout_rate: header.dropout_rate,
        seed: header.seed,
        step_count: header.step_count,
        params,
    };
    if !model.is_finite() {
        return Err(err("non-finite parameter"));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SegModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}
