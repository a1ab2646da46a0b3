//! Error types for fallible subsystems. Shape and mode contract violations
//! panic instead: they are programming errors, not runtime conditions.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no usable sequences in {path} ({dropped} empty records dropped)")]
    EmptyCorpus { path: PathBuf, dropped: usize },
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("vocabulary alphabet contains duplicate token {0:?}")]
    DuplicateToken(char),
    #[error("vocabulary alphabet is empty")]
    EmptyAlphabet,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint config fingerprint does not match the active config")]
    FingerprintMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in parameter {name} at step {step}; update aborted")]
    NonFiniteGradient { name: String, step: u64 },
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("metrics stream error: {0}")]
    Metrics(#[from] std::io::Error),
}
