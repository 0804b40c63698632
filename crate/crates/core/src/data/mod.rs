//! Dataset schema, manifest ingestion, batching and synthetic data.

mod batch;
mod manifest;
mod schema;
mod synth;

pub use batch::{batch_iter, BatchMode, FeatureBatch};
pub use manifest::{load_manifest, write_manifest, EntityEntry, Manifest, MentionEntry, TensorRef, FORMAT_VERSION};
pub use schema::{
    Dataset, EntityRecord, FeatureBundle, FeatureDims, KnowledgeBase, MentionRecord, CLS_TENSORS, IMG_LOCAL,
    TXT_HIDDEN,
};
pub use synth::{synth_dataset, SynthSpec};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation in {record}: {message}")]
    Schema { record: String, message: String },
    #[error("unsupported manifest format version {0}")]
    UnsupportedVersion(u32),
    #[error("{record}: tensor {tensor} at offset {offset} (+{len} bytes) runs past the blob ({blob_len} bytes)")]
    DanglingOffset {
        record: String,
        tensor: String,
        offset: u64,
        len: u64,
        blob_len: u64,
    },
    #[error("{record}: tensor {tensor} offset {offset} is not 4-byte aligned")]
    Misaligned { record: String, tensor: String, offset: u64 },
    #[error("{record}: tensor {tensor} has shape {found:?}, expected {expected:?}")]
    DimMismatch {
        record: String,
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("mention {mention}: candidate {entity:?} is not in the knowledge base")]
    UnresolvedCandidate { mention: String, entity: String },
    #[error("mention {mention}: gold entity {entity:?} is not in the knowledge base")]
    UnresolvedGold { mention: String, entity: String },
    #[error("mention {mention}: candidate {entity:?} listed twice")]
    DuplicateCandidate { mention: String, entity: String },
    #[error("duplicate entity id {0:?}")]
    DuplicateEntity(String),
    #[error("duplicate mention id {0:?}")]
    DuplicateMention(String),
}
