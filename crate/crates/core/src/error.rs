//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad dimensions, incompatible layer stacks, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated an operation's precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A container/archive could not be parsed; names the offending entry
    /// where one is known.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying IO failure.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A metric was requested from a judge that did not pass its accuracy
    /// gate; results would be meaningless, so this is a hard error.
    #[error("metric invalid: {0}")]
    MetricInvalid(String),

    /// A loss term became non-finite during training; names the term.
    #[error("non-finite loss term '{term}' at step {step}")]
    NonFinite { term: String, step: u64 },
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
