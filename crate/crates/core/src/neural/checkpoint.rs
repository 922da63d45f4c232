//! Binary checkpoint format.
//!
//! ```text
//! b"R2PSMDL1"
//! u32 LE   header length in bytes
//! JSON     header: component, model config, normalize flag, tensor manifest
//! f32 LE   tensor data, concatenated in manifest order
//! ```
//!
//! Offsets in the manifest are byte offsets into the data section.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::{EncoderParams, Head, ModelConfig, TENSOR_NAMES};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"R2PSMDL1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub component: String,
    pub config: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    pub tensors: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(component: &str, normalize: Option<bool>, params: &EncoderParams) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut data = Vec::with_capacity(params.num_parameters() * 4);
    for (name, shape, values) in params.tensors() {
        tensors.push(TensorEntry {
            name: name.to_owned(),
            shape,
            offset: data.len(),
        });
        for &v in values {
            data.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        component: component.to_owned(),
        config: params.config,
        normalize,
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + data.len());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&u32::try_from(header.len()).map_err(|_| Error::Format("header too large".into()))?.to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&data);
    Ok(out)
}

/// Splits a `MAGIC | u32 len | JSON | payload` container.
pub(crate) fn split_container<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 12 || &bytes[..8] != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let rest = &bytes[12..];
    if rest.len() < len {
        return Err(Error::Format(format!(
            "header length {len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    Ok(rest.split_at(len))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, EncoderParams)> {
    let (header, data) = split_container(bytes, CHECKPOINT_MAGIC)?;
    let header: CheckpointHeader =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let cfg = header.config;
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let with_head = header.tensors.len() == TENSOR_NAMES.len();
    let d = cfg.dim;
    let mut expected: Vec<(&str, Vec<usize>)> = vec![
        (TENSOR_NAMES[0], vec![cfg.vocab_size, d]),
        (TENSOR_NAMES[1], vec![cfg.max_pos, d]),
        (TENSOR_NAMES[2], vec![d, d]),
        (TENSOR_NAMES[3], vec![d, d]),
        (TENSOR_NAMES[4], vec![d, d]),
    ];
    if with_head {
        expected.push((TENSOR_NAMES[5], vec![d]));
        expected.push((TENSOR_NAMES[6], vec![1]));
    }
    if header.tensors.len() != expected.len() {
        return Err(Error::Format(format!("unexpected tensor count {}", header.tensors.len())));
    }
    let mut values = Vec::with_capacity(expected.len());
    let mut cursor = 0usize;
    for (entry, (name, shape)) in header.tensors.iter().zip(&expected) {
        if entry.name != *name || entry.shape != *shape || entry.offset != cursor {
            return Err(Error::Format(format!("inconsistent manifest entry {entry:?}")));
        }
        let n: usize = shape.iter().product();
        let end = cursor + n * 4;
        let chunk = data
            .get(cursor..end)
            .ok_or_else(|| Error::Format(format!("tensor {name} truncated")))?;
        values.push(
            chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect::<Vec<f64>>(),
        );
        cursor = end;
    }
    if cursor != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after tensor data",
            data.len() - cursor
        )));
    }
    let mut it = values.into_iter();
    let mut mat = |rows: usize, cols: usize| {
        Array2::from_shape_vec((rows, cols), it.next().expect("validated count")).expect("validated shape")
    };
    let token_emb = mat(cfg.vocab_size, d);
    let pos_emb = mat(cfg.max_pos, d);
    let w_q = mat(d, d);
    let w_k = mat(d, d);
    let w_v = mat(d, d);
    let head = if with_head {
        let w = Array1::from(it.next().expect("validated count"));
        let bias = it.next().expect("validated count")[0];
        Some(Head { w, bias })
    } else {
        None
    };
    let params = EncoderParams {
        config: cfg,
        token_emb,
        pos_emb,
        w_q,
        w_k,
        w_v,
        head,
    };
    if !params.all_finite() {
        return Err(Error::Format("non-finite parameter".into()));
    }
    Ok((header, params))
}

pub fn save_checkpoint(path: &Path, component: &str, normalize: Option<bool>, params: &EncoderParams) -> Result<()> {
    fs::write(path, checkpoint_bytes(component, normalize, params)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, EncoderParams)> {
    parse_checkpoint(&fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
