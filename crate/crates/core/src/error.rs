use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("empty sequence: feature file declares T = 0")]
    EmptySequence,
    #[error("non-finite value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("malformed manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("need at least two sessions for cross-session folds, found {0}")]
    SingleSession(usize),
    #[error("sequence too short to mask (T = {0})")]
    TooShortToMask(usize),
    #[error("empty mask")]
    EmptyMask,
    #[error("insufficient warm-up: {available} embeddings for {needed} prototypes")]
    InsufficientWarmup { needed: usize, available: usize },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("non-finite activation after layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("sequence length {len} exceeds positional table of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("epoch {epoch} outside [0, {total}]")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("empty confusion matrix")]
    EmptyConfusion,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
