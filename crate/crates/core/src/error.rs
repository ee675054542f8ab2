use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PtychoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PtychoError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Dataset(#[from] DatasetError),

    #[error("optimisation diverged at epoch {epoch}")]
    Diverged {
        epoch: u64,
        last_state: Box<crate::reconstruct::ReconstructionState>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

/// Structured failures from the dataset container and its import shims.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("unsupported container format tag {0:?}")]
    UnknownFormat(String),
    #[error("unsupported container version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("manifest parse error: {0}")]
    Manifest(String),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("payload has {found} trailing bytes beyond the declared frames")]
    TrailingBytes { found: usize },
    #[error("checksum mismatch: manifest says {expected}, payload hashes to {actual}")]
    Checksum { expected: String, actual: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tiff import: {0}")]
    Tiff(String),
}

impl PtychoError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PtychoError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            PtychoError::Shape { .. } => "shape",
            PtychoError::TapeConsumed => "tape_state",
            PtychoError::Numeric(_) => "numeric",
            PtychoError::InvalidArgument(_) => "invalid_argument",
            PtychoError::Config(_) => "config",
            PtychoError::Dataset(_) => "dataset",
            PtychoError::Diverged { .. } => "diverged",
            PtychoError::Io { .. } => "io",
            PtychoError::Image(_) => "image",
        }
    }
}
