//! Manifest + blob codec.
//!
//! The manifest is UTF-8 JSON describing records and where their tensors
//! live in a companion blob of little-endian `f32` values (row-major,
//! offsets in bytes, 4-byte aligned).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::schema::{
    Dataset, EntityRecord, FeatureBundle, FeatureDims, KnowledgeBase, MentionRecord, CLS_TENSORS,
    IMG_LOCAL, TXT_HIDDEN,
};
use super::DataError;
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRef {
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MentionEntry {
    pub id: String,
    pub sentence: String,
    #[serde(default)]
    pub aux_text: String,
    pub gold: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
    pub tensors: BTreeMap<String, TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntityEntry {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub attributes: String,
    #[serde(default)]
    pub description: String,
    pub tensors: BTreeMap<String, TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub img_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub txt_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: FeatureDims,
    pub blob_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub mentions: Vec<MentionEntry>,
    pub entities: Vec<EntityEntry>,
    /// Free-form exporter metadata (encoder ids, layer indices, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub metadata: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Blob<'a> {
    bytes: &'a [u8],
}

impl Blob<'_> {
    fn tensor(&self, record: &str, name: &str, r: &TensorRef) -> Result<Tensor, DataError> {
        let count: usize = r.shape.iter().product();
        let len = (count as u64) * 4;
        let dangling = || DataError::DanglingOffset {
            record: record.to_string(),
            tensor: name.to_string(),
            offset: r.offset,
            len,
            blob_len: self.bytes.len() as u64,
        };
        if !r.offset.is_multiple_of(4) {
            return Err(DataError::Misaligned {
                record: record.to_string(),
                tensor: name.to_string(),
                offset: r.offset,
            });
        }
        let end = r.offset.checked_add(len).ok_or_else(dangling)?;
        if end > self.bytes.len() as u64 {
            return Err(dangling());
        }
        let raw = &self.bytes[r.offset as usize..end as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(r.shape.clone(), data).map_err(|e| DataError::Schema {
            record: record.to_string(),
            message: format!("tensor {name}: {e}"),
        })
    }

    fn bundle(
        &self,
        record: &str,
        tensors: &BTreeMap<String, TensorRef>,
        img_mask: &Option<Vec<bool>>,
        txt_mask: &Option<Vec<bool>>,
    ) -> Result<FeatureBundle, DataError> {
        for k in tensors.keys() {
            if !CLS_TENSORS.contains(&k.as_str()) && k != IMG_LOCAL && k != TXT_HIDDEN {
                return Err(DataError::Schema {
                    record: record.to_string(),
                    message: format!("unknown tensor name {k:?}"),
                });
            }
        }
        let get = |name: &str| -> Result<Tensor, DataError> {
            let r = tensors.get(name).ok_or_else(|| DataError::Schema {
                record: record.to_string(),
                message: format!("missing tensor {name:?}"),
            })?;
            self.tensor(record, name, r)
        };
        let cls = [get(CLS_TENSORS[0])?, get(CLS_TENSORS[1])?, get(CLS_TENSORS[2])?, get(CLS_TENSORS[3])?];
        let mut b = FeatureBundle::new(cls, get(IMG_LOCAL)?, get(TXT_HIDDEN)?);
        if let Some(m) = img_mask {
            b.img_mask = m.clone();
        }
        if let Some(m) = txt_mask {
            b.txt_mask = m.clone();
        }
        Ok(b)
    }
}

/// Reads and fully validates a manifest and its blob.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Schema {
        record: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(manifest.format_version));
    }
    let blob_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.blob_file);
    let bytes = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let blob = Blob { bytes: &bytes };

    let mut entities = Vec::with_capacity(manifest.entities.len());
    for e in &manifest.entities {
        entities.push(EntityRecord {
            id: e.id.clone(),
            name: e.name.clone(),
            attributes: e.attributes.clone(),
            description: e.description.clone(),
            features: blob.bundle(&e.id, &e.tensors, &e.img_mask, &e.txt_mask)?,
        });
    }
    let kb = Arc::new(KnowledgeBase::new(entities)?);

    let mut mentions = Vec::with_capacity(manifest.mentions.len());
    for m in &manifest.mentions {
        mentions.push(MentionRecord {
            id: m.id.clone(),
            sentence: m.sentence.clone(),
            aux_text: m.aux_text.clone(),
            gold: m.gold.clone(),
            candidates: m.candidates.clone(),
            features: blob.bundle(&m.id, &m.tensors, &m.img_mask, &m.txt_mask)?,
        });
    }
    let split = manifest.split.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    let ds = Dataset::new(split, manifest.config, mentions, kb)?;
    if ds.gold_warnings > 0 {
        log::warn!(
            "{}: {} mention(s) without a gold entity in their candidates",
            path.display(),
            ds.gold_warnings
        );
    }
    Ok(ds)
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef {
            shape: t.shape().to_vec(),
            offset,
        }
    }

    fn bundle(&mut self, b: &FeatureBundle) -> BTreeMap<String, TensorRef> {
        let mut out = BTreeMap::new();
        for (name, t) in CLS_TENSORS.iter().zip(&b.img_cls) {
            out.insert(name.to_string(), self.push(t));
        }
        out.insert(IMG_LOCAL.to_string(), self.push(&b.img_local));
        out.insert(TXT_HIDDEN.to_string(), self.push(&b.txt_hidden));
        out
    }
}

fn explicit_mask(mask: &[bool]) -> Option<Vec<bool>> {
    if mask.iter().all(|&b| b) {
        None
    } else {
        Some(mask.to_vec())
    }
}

/// Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`; returns the manifest path.
pub fn write_manifest(ds: &Dataset, dir: impl AsRef<Path>, stem: &str) -> Result<PathBuf, DataError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let blob_file = format!("{stem}.bin");
    let mut w = BlobWriter { bytes: Vec::new() };

    let mentions = ds
        .mentions
        .iter()
        .map(|m| MentionEntry {
            id: m.id.clone(),
            sentence: m.sentence.clone(),
            aux_text: m.aux_text.clone(),
            gold: m.gold.clone(),
            candidates: m.candidates.clone(),
            tensors: w.bundle(&m.features),
            img_mask: explicit_mask(&m.features.img_mask),
            txt_mask: explicit_mask(&m.features.txt_mask),
        })
        .collect();
    let entities = ds
        .kb
        .entities()
        .iter()
        .map(|e| EntityEntry {
            id: e.id.clone(),
            name: e.name.clone(),
            attributes: e.attributes.clone(),
            description: e.description.clone(),
            tensors: w.bundle(&e.features),
            img_mask: explicit_mask(&e.features.img_mask),
            txt_mask: explicit_mask(&e.features.txt_mask),
        })
        .collect();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ds.dims,
        blob_file: blob_file.clone(),
        split: Some(ds.split.clone()),
        mentions,
        entities,
        metadata: serde_json::Value::Null,
    };
    let blob_path = dir.join(&blob_file);
    fs::write(&blob_path, &w.bytes).map_err(io_err(&blob_path))?;
    let path = dir.join(format!("{stem}.json"));
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(path)
}
