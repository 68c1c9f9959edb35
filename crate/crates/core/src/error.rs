use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid lattice shape: {0}")]
    LatticeShape(String),

    #[error("too many paths to enumerate: {paths} > limit {limit}")]
    TooManyPaths { paths: u128, limit: u128 },

    #[error("alignment does not fit lattice: {0}")]
    PathMismatch(String),

    #[error("band mask does not connect start to end")]
    DisconnectedMask,

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("parameter shape mismatch in group `{group}`: {detail}")]
    ShapeMismatch { group: String, detail: String },

    #[error("input shape mismatch: {0}")]
    InputShape(String),

    #[error("activation cache does not match parameters: {0}")]
    CacheMismatch(String),

    #[error("no device updates to aggregate")]
    EmptyUpdates,

    #[error("device updates from mixed rounds (expected {expected}, got {got})")]
    MixedRounds { expected: usize, got: usize },

    #[error("device {device} exhausted its example queue in round {round}")]
    QueueExhausted { device: usize, round: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad magic in checkpoint {0}")]
    BadMagic(PathBuf),

    #[error("truncated checkpoint {0}")]
    Truncated(PathBuf),

    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),

    #[error("malformed record at line {line}: {detail}")]
    Record { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short stable identifier, used for machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::NonFinite(_) => "non_finite",
            Error::LatticeShape(_) => "lattice_shape",
            Error::TooManyPaths { .. } => "too_many_paths",
            Error::PathMismatch(_) => "path_mismatch",
            Error::DisconnectedMask => "disconnected_mask",
            Error::UnknownGroup(_) => "unknown_group",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::InputShape(_) => "input_shape",
            Error::CacheMismatch(_) => "cache_mismatch",
            Error::EmptyUpdates => "empty_updates",
            Error::MixedRounds { .. } => "mixed_rounds",
            Error::QueueExhausted { .. } => "queue_exhausted",
            Error::Divergence { .. } => "divergence",
            Error::Config(_) => "config",
            Error::EmptyDataset => "empty_dataset",
            Error::BadMagic(_) => "bad_magic",
            Error::Truncated(_) => "truncated",
            Error::Manifest(_) => "manifest",
            Error::Record { .. } => "record",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
