use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("crop out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate normalization scale: {0}")]
    DegenerateScale(String),

    #[error("normalization state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("manifest corruption: {0}")]
    Manifest(String),

    #[error("checkpoint corruption in layer `{layer}`: {message}")]
    Corruption { layer: String, message: String },

    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    ModelKind { expected: String, found: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (parameter L2 norm {param_norm:e}, loss {loss})")]
    NonFinite {
        epoch: usize,
        batch: usize,
        param_norm: f64,
        loss: f64,
    },

    #[error("JSON error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::ModelKind { .. } => ErrorClass::Config,
            Error::NonFinite { .. } => ErrorClass::Numerical,
            _ => ErrorClass::Data,
        }
    }
}
