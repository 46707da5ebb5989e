//! Crate-wide error type.
//!
//! Every fallible operation returns [`Result`]. Variants are grouped by the
//! kind of failure so the CLI can map them to exit codes.

use std::path::PathBuf;

/// Errors produced by voxstyle operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value failed validation (bad flag, bad config file
    /// field, invalid combination of controls).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data violated a structural invariant (camera count mismatch,
    /// non-binary mask, overlapping region masks, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Two tensors that must share dimensions do not.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// An image is too small for the deepest requested feature block.
    #[error("image {height}x{width} too small for block {block} (needs at least {min}x{min})")]
    ImageTooSmall {
        block: &'static str,
        height: usize,
        width: usize,
        min: usize,
    },

    /// A numeric computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A checkpoint or weights file is malformed or has the wrong version.
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Codec {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn codec(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Codec {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error category. Success is 0.
    ///
    /// 2 = configuration/validation, 3 = io/format, 4 = numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation(_) | Error::DimMismatch(_) => 2,
            Error::ImageTooSmall { .. } => 2,
            Error::Io { .. } | Error::Codec { .. } | Error::Format { .. } => 3,
            Error::NonFinite(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
