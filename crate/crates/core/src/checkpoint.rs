//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `VPML`, `u32` version, `u64` metadata
//! length and the metadata JSON, `u32` tensor count, then per tensor a
//! `u32`-prefixed UTF-8 name, `u32` rank, the `u64` extents and the `u64`
//! absolute byte offset of its `f32` payload. Payloads follow the
//! directory. Optimizer moments are stored as `optim.m.<name>` and
//! `optim.v.<name>`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::HyperConfig;
use crate::model::Model;
use crate::numerics::{OptimState, ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"VPML";
pub const VERSION: u32 = 1;

const MOMENT1: &str = "optim.m.";
const MOMENT2: &str = "optim.v.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Parse(String),
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("config digest mismatch: checkpoint has {stored}, found {actual}")]
    DigestMismatch { stored: String, actual: String },
}

/// Run state stored next to the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config_digest: String,
    pub epoch: usize,
    pub step: u64,
    pub best_dev_hit1: f64,
    pub seed: u64,
    pub config: HyperConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model<f32>,
    pub optim: Option<OptimState<f32>>,
}

impl Checkpoint {
    /// `step` must equal `optim.step` when optimizer state is included;
    /// loading restores the optimizer's step count from it.
    pub fn new(model: Model<f32>, optim: Option<OptimState<f32>>, epoch: usize, step: u64, best_dev_hit1: f64) -> Self {
        debug_assert!(optim.as_ref().is_none_or(|o| o.step == step));
        let meta = CheckpointMeta {
            config_digest: model.config.digest(),
            epoch,
            step,
            best_dev_hit1,
            seed: model.config.seed,
            config: model.config.clone(),
        };
        Checkpoint { meta, model, optim }
    }

    /// Refuses to proceed unless `config` hashes to the stored digest.
    pub fn verify_config(&self, config: &HyperConfig) -> Result<(), CheckpointError> {
        let actual = config.digest();
        if actual != self.meta.config_digest {
            return Err(CheckpointError::DigestMismatch {
                stored: self.meta.config_digest.clone(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, &Tensor)> = self
            .model
            .params
            .iter()
            .map(|(k, p)| (k.to_string(), &p.value))
            .collect();
        if let Some(o) = &self.optim {
            tensors.extend(o.first.iter().map(|(k, t)| (format!("{MOMENT1}{k}"), t)));
            tensors.extend(o.second.iter().map(|(k, t)| (format!("{MOMENT2}{k}"), t)));
        }
        let meta = serde_json::to_vec(&self.meta).expect("metadata serialises");

        let mut dir_len = 4usize;
        for (name, t) in &tensors {
            dir_len += 4 + name.len() + 4 + 8 * t.rank() + 8;
        }
        let header_len = 4 + 4 + 8 + meta.len() + dir_len;

        let mut out = Vec::with_capacity(header_len + tensors.iter().map(|(_, t)| 4 * t.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (name, t) in &tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 4 * t.numel() as u64;
        }
        debug_assert_eq!(out.len(), header_len);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::Parse("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version {
                found: version,
                expected: VERSION,
            });
        }
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Parse(format!("metadata: {e}")))?;
        let actual = meta.config.digest();
        if actual != meta.config_digest {
            return Err(CheckpointError::DigestMismatch {
                stored: meta.config_digest.clone(),
                actual,
            });
        }

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::Parse("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let offset = r.u64()?;
            entries.push((name, shape, offset));
        }

        let mut params = ParamStore::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, shape, offset) in entries {
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Parse(format!("tensor {name}: shape overflow")))?;
            let start = usize::try_from(offset).map_err(|_| CheckpointError::Parse("offset overflow".into()))?;
            let end = n
                .checked_mul(4)
                .and_then(|len| start.checked_add(len))
                .filter(|&end| end <= bytes.len())
                .ok_or_else(|| CheckpointError::Parse(format!("tensor {name} runs past the end of the file")))?;
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Parse(format!("tensor {name}: {e}")))?;
            if let Some(k) = name.strip_prefix(MOMENT1) {
                first.insert(k.to_string(), t);
            } else if let Some(k) = name.strip_prefix(MOMENT2) {
                second.insert(k.to_string(), t);
            } else {
                params
                    .insert(name, t)
                    .map_err(|e| CheckpointError::Parse(e.to_string()))?;
            }
        }

        let optim = if first.is_empty() && second.is_empty() {
            None
        } else {
            Some(OptimState {
                config: meta.config.optimizer(),
                step: meta.step,
                first,
                second,
            })
        };
        let model = Model {
            config: meta.config.clone(),
            params,
        };
        Ok(Checkpoint { meta, model, optim })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Parse(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
