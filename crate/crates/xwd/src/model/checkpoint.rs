//! Versioned binary checkpoint container for encoder states.
//!
//! Layout: magic `XWCK`, format version (u32 LE), header length (u32 LE),
//! a JSON header (config, window name, trainable flag, provenance, window
//! normalization stats, and the name/shape of every tensor and buffer),
//! followed by all parameter values and then all normalization buffers as
//! little-endian f64 in header order. Gradients are never persisted.
//!
//! Serialization is canonical: the same state always produces the same
//! bytes, so checkpoint hashes are stable identity markers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{build_encoder, EncoderConfig, EncoderState, Provenance};
use crate::windowing::NormStats;
use crate::{Result, XwdError};

const MAGIC: &[u8; 4] = b"XWCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BufferMeta {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: EncoderConfig,
    window_name: String,
    trainable: bool,
    provenance: Provenance,
    norm_stats: Option<NormStats>,
    tensors: Vec<TensorMeta>,
    buffers: Vec<BufferMeta>,
}

/// Serializes a state to its canonical checkpoint bytes.
pub fn checkpoint_bytes(state: &EncoderState) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut tensor_data: Vec<&[f64]> = Vec::new();
    state.visit_params(&mut |name, p| {
        tensors.push(TensorMeta {
            name,
            shape: p.shape.clone(),
        });
        tensor_data.push(&p.val);
    });
    let mut buffers = Vec::new();
    let mut buffer_data: Vec<&[f64]> = Vec::new();
    state.visit_buffers(&mut |name, b| {
        buffers.push(BufferMeta { name, len: b.len() });
        buffer_data.push(b);
    });

    let header = Header {
        config: state.config.clone(),
        window_name: state.window_name.clone(),
        trainable: state.trainable,
        provenance: state.provenance.clone(),
        norm_stats: state.norm_stats,
        tensors,
        buffers,
    };
    let header_json = serde_json::to_vec(&header)?;

    let payload_len: usize = tensor_data.iter().chain(&buffer_data).map(|d| d.len() * 8).sum();
    let mut out = Vec::with_capacity(12 + header_json.len() + payload_len);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for data in tensor_data.iter().chain(&buffer_data) {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save_checkpoint(state: &EncoderState, path: &Path) -> Result<()> {
    let bytes = checkpoint_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint back into a full encoder state.
pub fn load_checkpoint(path: &Path) -> Result<EncoderState> {
    let bytes = fs::read(path)?;
    checkpoint_from_bytes(&bytes, &path.display().to_string())
}

/// Loads a checkpoint and verifies it matches an expected architecture.
pub fn load_checkpoint_for(path: &Path, expected: &EncoderConfig) -> Result<EncoderState> {
    let state = load_checkpoint(path)?;
    if &state.config != expected {
        return Err(XwdError::DimensionMismatch(format!(
            "checkpoint {} was built for a different architecture (feature_dim {} vs {})",
            path.display(),
            state.config.feature_dim,
            expected.feature_dim
        )));
    }
    Ok(state)
}

/// Parses canonical checkpoint bytes; `origin` names the source in errors.
pub fn checkpoint_from_bytes(bytes: &[u8], origin: &str) -> Result<EncoderState> {
    let corrupt = |reason: &str| XwdError::CorruptCheckpoint {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 {
        return Err(corrupt("file shorter than fixed header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(corrupt("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| corrupt(&format!("unparseable header: {e}")))?;

    let n_values: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    let n_buffer: usize = header.buffers.iter().map(|b| b.len).sum();
    let expected_len = payload_start + (n_values + n_buffer) * 8;
    if bytes.len() != expected_len {
        return Err(corrupt(&format!(
            "payload length {} does not match header ({} expected)",
            bytes.len() - payload_start,
            expected_len - payload_start
        )));
    }

    // Rebuild the architecture, then overwrite every parameter in header
    // order, verifying names and shapes line up with the construction.
    let mut state = build_encoder(&header.config, &header.window_name, 0)
        .map_err(|e| corrupt(&format!("header config invalid: {e}")))?;
    let mut cursor = payload_start;
    let mut idx = 0;
    let mut failure: Option<XwdError> = None;
    state.visit_params_mut(&mut |name, p| {
        if failure.is_some() {
            return;
        }
        let Some(meta) = header.tensors.get(idx) else {
            failure = Some(corrupt("fewer tensors than the architecture requires"));
            return;
        };
        if meta.name != name || meta.shape != p.shape {
            failure = Some(corrupt(&format!(
                "tensor {idx} is '{}' {:?}, expected '{}' {:?}",
                meta.name, meta.shape, name, p.shape
            )));
            return;
        }
        for v in p.val.iter_mut() {
            *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
        idx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if idx != header.tensors.len() {
        return Err(corrupt("more tensors than the architecture requires"));
    }

    let mut bidx = 0;
    state.visit_buffers_mut(&mut |name, b| {
        if failure.is_some() {
            return;
        }
        let Some(meta) = header.buffers.get(bidx) else {
            failure = Some(corrupt("fewer buffers than the architecture requires"));
            return;
        };
        if meta.name != name || meta.len != b.len() {
            failure = Some(corrupt(&format!(
                "buffer {bidx} is '{}' (len {}), expected '{}' (len {})",
                meta.name,
                meta.len,
                name,
                b.len()
            )));
            return;
        }
        for v in b.iter_mut() {
            *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
        bidx += 1;
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if bidx != header.buffers.len() {
        return Err(corrupt("more buffers than the architecture requires"));
    }

    state.trainable = header.trainable;
    state.provenance = header.provenance;
    state.norm_stats = header.norm_stats;
    Ok(state)
}
