//! Retrieval engine for visual-prompt-guided multimodal entity linking.
//!
//! Mentions (an image with a drawn box plus text) and knowledge-base
//! entities arrive as precomputed encoder features. The crate trains the
//! projection heads and the visual, textual and cross-modal interaction
//! units with an in-batch contrastive objective, then ranks candidates.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod eval;
pub mod heads;
pub mod interaction;
pub mod model;
mod nn;
pub mod numerics;
pub mod objective;
pub mod qa;
pub mod training;

use std::path::PathBuf;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use config::{ConfigError, HyperConfig};
pub use data::DataError;
pub use model::Model;
pub use numerics::NumericsError;
pub use qa::QaError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Qa(#[from] QaError),
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteLoss { epoch: usize, batch: usize, norms: String },
    #[error("non-finite gradient for {param} at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        param: String,
        norms: String,
    },
}

impl Error {
    /// Bad input (config, data, checkpoint file) as opposed to a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Qa(_) | Error::Validation(_) => true,
            Error::Data(e) => !matches!(e, DataError::Io { .. }),
            Error::Checkpoint(e) => !matches!(e, CheckpointError::Io { .. }),
            Error::Numerics(_) | Error::Io { .. }
            | Error::NonFiniteLoss { .. }
            | Error::NonFiniteGradient { .. } => false,
        }
    }
}
