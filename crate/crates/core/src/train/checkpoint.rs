//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE header length, JSON
//! header, then every blob as f64 LE in header-index order, then the SHA-256
//! of all preceding bytes. A file is parsed only after its digest checks out,
//! so a damaged file never yields partial state.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::adam::AdamMeta;
use crate::nn::params::{Blob, LoadReport};
use crate::nn::ParamStore;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FVOXCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Group holding module parameters and buffers.
pub const MODEL_GROUP: &str = "model";
/// Snapshot of the best-validation parameters inside a training state.
pub const BEST_GROUP: &str = "best";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Prosody,
    Lip,
    Face,
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Prosody => "prosody",
            Stage::Lip => "lip",
            Stage::Face => "face",
            Stage::Joint => "joint",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Early-stopping bookkeeping carried by training-state checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Progress {
    pub best: Option<f64>,
    pub best_step: u64,
    pub stale_epochs: usize,
    pub improved_this_epoch: bool,
    pub finished: bool,
    /// `(step, validation metric)` for every evaluation so far.
    pub history: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub stage: Stage,
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Full run config as TOML, so a checkpoint can rebuild its models.
    pub config: String,
    pub optimizers: BTreeMap<String, AdamMeta>,
    /// Present in resumable training states, absent in stage outputs.
    pub progress: Option<Progress>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub groups: BTreeMap<String, Vec<Blob>>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    header: CheckpointHeader,
    index: Vec<IndexEntry>,
}

fn integrity(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: integrity check failed: {what}", path.display()))
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> &[Blob] {
        self.groups.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut index = Vec::new();
        for (g, blobs) in &self.groups {
            for b in blobs {
                if b.shape.iter().product::<usize>() != b.data.len() {
                    return Err(Error::Checkpoint(format!(
                        "blob {g}/{} has {} values for shape {:?}",
                        b.name,
                        b.data.len(),
                        b.shape
                    )));
                }
                index.push(IndexEntry {
                    group: g.clone(),
                    name: b.name.clone(),
                    shape: b.shape.clone(),
                });
            }
        }
        let json = serde_json::to_vec(&FileHeader {
            header: self.header.clone(),
            index,
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for blobs in self.groups.values() {
            for b in blobs {
                for v in &b.data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        const PRE: usize = 8 + 4 + 8;
        if bytes.len() < PRE + 32 {
            return Err(integrity(path, "file is truncated"));
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint file",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: format version {version} unsupported (expected {CHECKPOINT_VERSION})",
                path.display()
            )));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity(path, "digest mismatch (file truncated or modified)"));
        }
        let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
        if body.len() < PRE + hlen {
            return Err(integrity(path, "header length exceeds file"));
        }
        let fh: FileHeader = serde_json::from_slice(&body[PRE..PRE + hlen])?;
        let data = &body[PRE + hlen..];
        let total: usize = fh
            .index
            .iter()
            .map(|e| e.shape.iter().product::<usize>())
            .sum();
        if data.len() != total * 8 {
            return Err(integrity(path, "blob payload size does not match index"));
        }
        let mut groups: BTreeMap<String, Vec<Blob>> = BTreeMap::new();
        let mut off = 0;
        for e in fh.index {
            let n: usize = e.shape.iter().product();
            let vals = data[off..off + n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += n * 8;
            groups.entry(e.group).or_default().push(Blob {
                name: e.name,
                shape: e.shape,
                data: vals,
            });
        }
        Ok(Self {
            header: fh.header,
            groups,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::NotFound(format!("checkpoint {}", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads the model group into `ps`. Entries of `ps` that the checkpoint
    /// lacks keep their current (fresh) values and are listed as missing.
    pub fn apply(&self, ps: &ParamStore) -> Result<LoadReport> {
        ps.load_blobs(self.group(MODEL_GROUP))
    }

    /// SHA-256 over the serialized model group, used to identify checkpoints in reports.
    pub fn model_hash(&self) -> String {
        let mut h = Sha256::new();
        for b in self.group(MODEL_GROUP) {
            h.update(b.name.as_bytes());
            for d in &b.shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in &b.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Model entries of `ps` under any of `prefixes`.
pub fn model_blobs(ps: &ParamStore, prefixes: &[&str]) -> Result<Vec<Blob>> {
    Ok(ps
        .to_blobs()?
        .into_iter()
        .map(|(_, b)| b)
        .filter(|b| prefixes.iter().any(|p| b.name.starts_with(p)))
        .collect())
}
