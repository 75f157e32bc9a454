//! Single-file checkpoints.
//!
//! Layout: `u64` little-endian header length, the JSON header, then every
//! tensor as little-endian `f32` values concatenated in header order.
//! `byte_offset` in the header is relative to the start of the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::Params;
use crate::error::{shape_err, PcqError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata, typically the model configuration.
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor<f32>>,
}

pub fn encode_checkpoint(params: &Params<f32>, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut entries = Vec::with_capacity(params.len());
    for (_, p) in params.iter() {
        entries.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            byte_offset: offset,
        });
        offset += 4 * p.value.len() as u64;
    }
    let header = serde_json::to_vec(&CheckpointHeader {
        tensors: entries,
        meta,
    })?;
    let mut out = Vec::with_capacity(8 + header.len() + offset as usize);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, p) in params.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| PcqError::Data(format!("malformed checkpoint: {m}"));
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .ok_or_else(|| bad("truncated length"))?
        .try_into()
        .unwrap();
    let hlen = u64::from_le_bytes(len_bytes) as usize;
    let header_bytes = bytes
        .get(8..8 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
    let blob = &bytes[8 + hlen..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.byte_offset as usize;
        let raw = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| bad(&format!("blob too short for {}", e.name)))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(&e.shape, data)?);
    }
    Ok(Checkpoint { header, tensors })
}

pub fn save_checkpoint(path: &Path, params: &Params<f32>, meta: serde_json::Value) -> Result<()> {
    let bytes = encode_checkpoint(params, meta)?;
    fs::write(path, bytes).map_err(|e| PcqError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| PcqError::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl Checkpoint {
    /// Copies every stored tensor into `params` by name. All parameters must
    /// be present with matching shapes.
    pub fn apply(&self, params: &mut Params<f32>) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(shape_err!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            ));
        }
        for (entry, t) in self.header.tensors.iter().zip(&self.tensors) {
            let id = params
                .find(&entry.name)
                .ok_or_else(|| shape_err!("unknown parameter {} in checkpoint", entry.name))?;
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(shape_err!(
                    "{}: checkpoint shape {:?} != model shape {:?}",
                    entry.name,
                    t.shape(),
                    dst.shape()
                ));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
