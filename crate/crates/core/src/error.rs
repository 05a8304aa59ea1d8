use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at byte offset {offset}: {source}")]
    Io {
        offset: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot access {path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated {what}: expected {expected} bytes, {available} available")]
    Truncated {
        what: &'static str,
        expected: u64,
        available: u64,
    },

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("negative attention entry {value} in {context} at ({row}, {col})")]
    NegativeAttention {
        context: String,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("block indices must be strictly increasing: {0:?}")]
    BlockOrder(Vec<usize>),

    #[error("bundle has no attention blocks")]
    EmptyBlocks,

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("single-class mask: {0}")]
    SingleClass(String),

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        context: impl Into<String>,
        expected: impl ToString,
        found: impl ToString,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}
