use std::path::PathBuf;

/// Errors surfaced by the library's fallible operations.
///
/// Shape and argument mismatches are reported as contract violations rather
/// than panics so that callers (CLI stages, tests) can attach context.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch,
    /// empty input, out-of-range argument, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Training produced a non-finite loss; carries a diagnostic dump of the
    /// step at which it happened.
    #[error("non-finite loss at step {step}: {details}")]
    NonFiniteLoss { step: u64, details: String },

    /// A checkpoint or manifest file could not be decoded. `offset` is the
    /// byte offset (checkpoints) or line number (text manifests) at which
    /// decoding failed.
    #[error("parse error in {path:?} at offset {offset}: {what}")]
    Parse {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
