use std::path::PathBuf;

/// Engine-wide error type. The variant encodes the failure class a caller
/// (and the CLI exit-code mapping) cares about, the message carries detail.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad user-supplied configuration: out-of-range parameter, unknown key,
    /// inconsistent dimensions requested up front.
    #[error("configuration: {0}")]
    Config(String),

    /// An internal API contract was violated by the caller (shape mismatch,
    /// mismatched filters across branches, backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numeric failure at runtime: NaN/Inf produced by an operation or found
    /// in gradients, or a gradient check exceeding its tolerance.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Malformed serialized artifact: weight file, manifest, PNG.
    #[error("format error: {0}")]
    Format(String),

    /// Dataset on disk disagrees with its manifest (missing file, size
    /// mismatch, count mismatch).
    #[error("data integrity: {0}")]
    Integrity(String),

    /// Teacher upsampler backend failed (nonzero exit, missing or mis-sized
    /// outputs).
    #[error("teacher backend: {0}")]
    Backend(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    /// Attach a path to a bare io::Error.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
