//! Loss, optimizer, the training loop and the model file format.

mod config;
mod model;
mod network;
mod optim;
mod serialize;
mod train;

pub use config::{ArchConfig, Precision, Strategy, TrainConfig};
pub use model::{evaluate, Model, ScoredCode, StayPrediction};
pub use network::{Forward, Head, Network};
pub use optim::{bce_loss, Adam, AdamHyper};
pub use serialize::{load_model, save_model, MODEL_HEADER};
pub use train::{train, train_with_progress, EpochRecord, History};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::encoder::EncoderError;
use crate::heads::HeadError;
use crate::labelspace::LabelSpaceError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("label space does not cover the training corpus: {0}")]
    LabelSpaceMismatch(#[source] LabelSpaceError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported model file version {found:?}")]
    VersionMismatch { found: String },
    #[error("model file checksum mismatch (truncated or corrupted)")]
    ChecksumMismatch,
    #[error("malformed model file: {0}")]
    Format(String),
}

/// Lowercase hex SHA-256.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
