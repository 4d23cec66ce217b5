use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by volume handling, clustering, perturbation and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimsMismatch { expected: Dims, found: Dims },

    #[error("crop target {target} exceeds source {volume}")]
    CropTooLarge { volume: Dims, target: Dims },

    #[error("missing file {}", path.display())]
    MissingFile { path: PathBuf },

    #[error("{}: expected {expected} bytes, found {actual}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("unknown sequence name {0:?}")]
    UnknownSequence(String),

    #[error("malformed metadata in {}: {message}", path.display())]
    MalformedMetadata { path: PathBuf, message: String },

    #[error("NIfTI parse error in field `{field}` at offset {offset}: {message}")]
    Nifti {
        field: &'static str,
        offset: usize,
        message: String,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("index {index} out of range (limit {limit})")]
    OutOfRange { index: usize, limit: usize },

    #[error("empty ground truth mask")]
    EmptyGroundTruth,

    #[error("oracle error on superpixel {superpixel:?}: {source}")]
    Oracle {
        superpixel: Option<usize>,
        #[source]
        source: crate::classifier::OracleError,
    },

    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

impl From<crate::classifier::OracleError> for Error {
    fn from(source: crate::classifier::OracleError) -> Self {
        Error::Oracle {
            superpixel: None,
            source,
        }
    }
}
