//! Checkpoint file: 8-byte magic, little-endian u64 header length, JSON
//! header, then every parameter value as little-endian f64 in store order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{EncoderConfig, FreezeMask, HeadConfig};
use super::params::{build_encoder, ModelParams};
use crate::error::{Error, Result};
use crate::tensorcore::ArrayF;

const MAGIC: &[u8; 8] = b"FPCKPT01";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub head: Option<HeadConfig>,
    pub mask: FreezeMask,
    pub seed: u64,
    /// Free-form training counters (epochs, optimizer steps, ...).
    pub counters: BTreeMap<String, u64>,
    pub config_hash: Option<String>,
    pub params: Vec<ParamEntry>,
}

fn format_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

impl ModelParams {
    pub fn checkpoint_header(&self, counters: BTreeMap<String, u64>, config_hash: Option<String>) -> CheckpointHeader {
        CheckpointHeader {
            encoder: self.config.clone(),
            head: self.head.as_ref().map(|h| h.config.clone()),
            mask: self.mask.clone(),
            seed: self.seed,
            counters,
            config_hash,
            params: self
                .store
                .iter()
                .map(|p| ParamEntry {
                    name: p.name.clone(),
                    shape: p.value().shape().to_vec(),
                    trainable: p.trainable(),
                })
                .collect(),
        }
    }

    pub fn to_checkpoint_bytes(&self, header: &CheckpointHeader) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * self.store.count_total());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.store.iter() {
            for v in p.value().data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], origin: &Path) -> Result<(ModelParams, CheckpointHeader)> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(format_err(origin, "not a checkpoint (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| format_err(origin, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        let mut model = build_encoder(&header.encoder, header.seed)?;
        if let Some(head) = &header.head {
            model.attach_head(head, header.seed)?;
        }
        if model.store.len() != header.params.len() {
            return Err(format_err(origin, "parameter list does not match the architecture"));
        }
        let mut blob = &bytes[16 + hlen..];
        for (i, entry) in header.params.iter().enumerate() {
            let id = crate::tensorcore::ParamId(i);
            let p = model.store.get(id);
            if p.name != entry.name || p.value().shape() != entry.shape.as_slice() {
                return Err(format_err(origin, format!("unexpected parameter {}", entry.name)));
            }
            let n = p.value().len();
            if blob.len() < 8 * n {
                return Err(format_err(origin, "truncated parameter blob"));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            blob = &blob[8 * n..];
            model.store.get_mut(id).set_value(ArrayF::new(entry.shape.clone(), data)?)?;
        }
        if !blob.is_empty() {
            return Err(format_err(origin, "trailing bytes after parameter blob"));
        }
        model.set_freeze_mask(&header.mask)?;
        Ok((model, header))
    }

    pub fn save_checkpoint(&self, path: &Path, header: &CheckpointHeader) -> Result<()> {
        let bytes = self.to_checkpoint_bytes(header)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointHeader)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, path)
    }
}
