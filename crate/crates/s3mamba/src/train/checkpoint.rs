//! `.s3mb` checkpoint files: magic, version, length-prefixed JSON tensor
//! directory, raw little-endian f64 payload, then a length-prefixed JSON
//! training-state section. Round-trips are bit-exact.

use super::Trainer;
use crate::adam::AdamState;
use crate::data::sample::DatasetConfig;
use crate::model::ModelConfig;
use crate::nn::ParamId;
use crate::train::TrainConfig;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// File magic.
pub const MAGIC: [u8; 4] = *b"S3MB";
/// Current format version.
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the payload.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorRecord>,
    payload_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    epoch: u64,
    adam_t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    model: ModelConfig,
    data: DatasetConfig,
    train: TrainConfig,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn push_tensor(
    records: &mut Vec<TensorRecord>,
    payload: &mut Vec<u8>,
    name: String,
    shape: Vec<usize>,
    data: &[f64],
) {
    let offset = payload.len() as u64;
    for v in data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    records.push(TensorRecord {
        name,
        shape,
        dtype: "f64".to_string(),
        offset,
        len: (data.len() * 8) as u64,
    });
}

/// Write the trainer's parameters, Adam moments, and configs to `path`.
pub fn save_checkpoint(path: &Path, t: &Trainer) -> Result<()> {
    let mut records = Vec::new();
    let mut payload = Vec::new();
    for (name, tensor) in t.ps.iter() {
        push_tensor(&mut records, &mut payload, name.to_string(), tensor.shape.clone(), &tensor.data);
    }
    for (i, (name, tensor)) in t.ps.iter().enumerate() {
        push_tensor(
            &mut records,
            &mut payload,
            format!("adam.m/{name}"),
            tensor.shape.clone(),
            &t.adam.m[i],
        );
    }
    for (i, (name, tensor)) in t.ps.iter().enumerate() {
        push_tensor(
            &mut records,
            &mut payload,
            format!("adam.v/{name}"),
            tensor.shape.clone(),
            &t.adam.v[i],
        );
    }
    let header = Header { tensors: records, payload_len: payload.len() as u64 };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| bad(format!("header encode: {e}")))?;
    let state = TrainState {
        epoch: t.epoch as u64,
        adam_t: t.adam.t,
        beta1: t.adam.beta1,
        beta2: t.adam.beta2,
        eps: t.adam.eps,
        model: t.model_cfg.clone(),
        data: t.data_cfg.clone(),
        train: t.cfg.clone(),
    };
    let state_json = serde_json::to_vec(&state).map_err(|e| bad(format!("state encode: {e}")))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + payload.len() + 8 + state_json.len());
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    bytes.extend_from_slice(&(state_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&state_json);
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_f64s(payload: &[u8], rec: &TensorRecord) -> Result<Vec<f64>> {
    let start = rec.offset as usize;
    let end = start + rec.len as usize;
    if end > payload.len() || rec.len % 8 != 0 {
        return Err(bad(format!("tensor '{}' payload range out of bounds", rec.name)));
    }
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Rebuild a [`Trainer`] from `path`, restoring every parameter and Adam
/// moment bit-exactly. The model is reconstructed from the stored configs and
/// its parameter names must match the file's directory one-for-one.
pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(bad("file too short for header"));
    }
    if bytes[0..4] != MAGIC {
        return Err(bad(format!("bad magic {:?} (want \"S3MB\")", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (want {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| bad(format!("header decode: {e}")))?;
    let payload_end = header_end + header.payload_len as usize;
    if bytes.len() < payload_end + 8 {
        return Err(bad("truncated payload"));
    }
    let payload = &bytes[header_end..payload_end];
    let state_len =
        u64::from_le_bytes(bytes[payload_end..payload_end + 8].try_into().unwrap()) as usize;
    if bytes.len() < payload_end + 8 + state_len {
        return Err(bad("truncated training-state section"));
    }
    let state: TrainState = serde_json::from_slice(&bytes[payload_end + 8..payload_end + 8 + state_len])
        .map_err(|e| bad(format!("state decode: {e}")))?;

    let mut trainer = Trainer::new(state.model, state.data, state.train)?;
    let n = trainer.ps.len();
    let expected = 3 * n;
    if header.tensors.len() != expected {
        return Err(bad(format!(
            "tensor count mismatch: file has {}, model wants {expected}",
            header.tensors.len()
        )));
    }
    for i in 0..n {
        let name = trainer.ps.name(ParamId(i)).to_string();
        let rec = &header.tensors[i];
        if rec.name != name {
            return Err(bad(format!("parameter {i} is '{}' in file, '{name}' in model", rec.name)));
        }
        if rec.dtype != "f64" {
            return Err(bad(format!("unsupported dtype '{}' for '{name}'", rec.dtype)));
        }
        let vals = read_f64s(payload, rec)?;
        let t = trainer.ps.get_mut(ParamId(i));
        if t.shape != rec.shape || vals.len() != t.data.len() {
            return Err(bad(format!("shape mismatch for '{name}'")));
        }
        t.data = vals;
    }
    let mut adam = AdamState::new(&trainer.ps);
    adam.t = state.adam_t;
    adam.beta1 = state.beta1;
    adam.beta2 = state.beta2;
    adam.eps = state.eps;
    for i in 0..n {
        let name = trainer.ps.name(ParamId(i)).to_string();
        for (dst, prefix, base) in
            [(&mut adam.m, "adam.m/", n + i), (&mut adam.v, "adam.v/", 2 * n + i)]
        {
            let rec = &header.tensors[base];
            if rec.name != format!("{prefix}{name}") {
                return Err(bad(format!("moment record '{}' out of order", rec.name)));
            }
            let vals = read_f64s(payload, rec)?;
            if vals.len() != dst[i].len() {
                return Err(bad(format!("moment length mismatch for '{name}'")));
            }
            dst[i] = vals;
        }
    }
    trainer.adam = adam;
    trainer.epoch = state.epoch as usize;
    Ok(trainer)
}
