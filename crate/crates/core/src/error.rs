use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {dim}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        found: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward called without a recorded forward pass: {0}")]
    NoForwardRecord(String),

    #[error("unknown variant `{0}` (expected one of b0..b5)")]
    UnknownVariant(String),

    #[error("arch text parse error on line {line}: {msg}")]
    ArchParse { line: usize, msg: String },

    #[error("weight file format error: {0}")]
    Format(String),

    #[error("missing weight entry `{0}`")]
    MissingEntry(String),

    #[error("layer `{name}`: dims {found:?} do not match expected {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("transfer plan: {0}")]
    Transfer(String),

    #[error("dataset shortfall: {0}")]
    Shortfall(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("unsupported bit depth {0} (expected 8 or 16)")]
    UnsupportedBitDepth(u32),

    #[error("resolution mismatch: model expects {expected}, got {found}")]
    ResolutionMismatch { expected: usize, found: usize },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },

    #[error("empty manifest")]
    EmptyManifest,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl std::fmt::Display,
        found: impl std::fmt::Display,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
