//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `CMMPCKPT`, a little-endian `u32` format
//! version, a little-endian `u64` header length, the JSON header, then every
//! parameter value as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::path::Path;

use cmmp_core::autograd::ParamStore;
use cmmp_core::linalg::Matrix;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, Result};
use crate::formats::{write_bytes, GspRecord, InventoryRecord};

pub const MAGIC: &[u8; 8] = b"CMMPCKPT";
pub const FORMAT_VERSION: u32 = 1;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Pretrained dual encoder only.
    Foundation,
    /// Encoder plus trained prompts and head.
    Model,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub config: BTreeMap<String, String>,
    pub config_hash: String,
    pub vocab: Vec<String>,
    pub inventory: InventoryRecord,
    pub gsp: Option<GspRecord>,
    /// Hash of the split file a model was trained on.
    pub split_hash: Option<String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub store: ParamStore,
}

impl Checkpoint {
    /// `header.params` is filled from `store`.
    pub fn new(mut header: CheckpointHeader, store: ParamStore) -> Self {
        header.params = store
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), shape: [p.value.rows(), p.value.cols()], trainable: p.trainable })
            .collect();
        Self { header, store }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * self.store.num_values(false));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(validation!("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(validation!("checkpoint format version {version}, expected {FORMAT_VERSION}"));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if len > MAX_HEADER || 20 + len as usize > bytes.len() {
            return Err(validation!("checkpoint header length {len} out of range"));
        }
        let end = 20 + len as usize;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[20..end]).map_err(|e| validation!("checkpoint header: {e}"))?;
        let total: usize = header.params.iter().map(|p| p.shape[0] * p.shape[1]).sum();
        if bytes.len() - end != 8 * total {
            return Err(validation!("checkpoint holds {} data bytes, header describes {}", bytes.len() - end, 8 * total));
        }
        let mut values = bytes[end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut store = ParamStore::new();
        for p in &header.params {
            if store.find(&p.name).is_some() {
                return Err(validation!("duplicate checkpoint parameter {}", p.name));
            }
            let data: Vec<f64> = values.by_ref().take(p.shape[0] * p.shape[1]).collect();
            store.add(p.name.clone(), Matrix::from_vec(p.shape[0], p.shape[1], data), p.trainable);
        }
        Ok(Self { header, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| validation!("{}: {e}", path.display()))
    }
}
