//! Head checkpoints.
//!
//! ```text
//! magic        8 bytes  "IDSIMCKP"
//! version      u32      currently 1
//! header_len   u32
//! header       JSON (CheckpointMeta)
//! payload      f32 little-endian, tensors in order
//!              cls.{w1,b1,w2,b2}, patch.{w1,b1,w2,b2}
//! ```

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{Activation, DualHead, Mlp};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IDSIMCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadShape {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: String,
    pub activation: Activation,
    pub cls: HeadShape,
    pub patch: HeadShape,
}

impl CheckpointMeta {
    pub fn for_head(head: &DualHead, seed: u64, config_hash: impl Into<String>) -> Self {
        let shape = |m: &Mlp| HeadShape {
            in_dim: m.in_dim(),
            hidden_dim: m.hidden_dim(),
            out_dim: m.out_dim(),
        };
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            seed,
            config_hash: config_hash.into(),
            activation: head.cls.activation,
            cls: shape(&head.cls),
            patch: shape(&head.patch),
        }
    }
}

pub fn checkpoint_bytes(head: &DualHead, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for t in head.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(head: &DualHead, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(head, meta)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(DualHead, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(DualHead, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let header = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let mut values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);

    let expected = |s: &HeadShape| s.hidden_dim * s.in_dim + s.hidden_dim + s.out_dim * s.hidden_dim + s.out_dim;
    if payload.len() != 4 * (expected(&meta.cls) + expected(&meta.patch)) {
        return Err(Error::Format("checkpoint payload does not match its header".into()));
    }
    let mut take_mlp = |s: &HeadShape| -> Mlp {
        let mut take = |n: usize| -> Vec<f64> { values.by_ref().take(n).collect() };
        let w1 = Array2::from_shape_vec((s.hidden_dim, s.in_dim), take(s.hidden_dim * s.in_dim)).unwrap();
        let b1 = Array1::from(take(s.hidden_dim));
        let w2 = Array2::from_shape_vec((s.out_dim, s.hidden_dim), take(s.out_dim * s.hidden_dim)).unwrap();
        let b2 = Array1::from(take(s.out_dim));
        Mlp {
            w1,
            b1,
            w2,
            b2,
            activation: meta.activation,
        }
    };
    let cls = take_mlp(&meta.cls);
    let patch = take_mlp(&meta.patch);
    let head = DualHead { cls, patch };
    if !head.is_finite() {
        return Err(Error::Format("checkpoint has non-finite parameters".into()));
    }
    Ok((head, meta))
}
