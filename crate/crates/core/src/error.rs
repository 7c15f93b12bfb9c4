//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error at {path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("duplicate item id {id} (first seen at line {first_line})")]
    DuplicateItem { id: String, first_line: usize },

    #[error("embedding file does not cover catalog items: {missing:?}")]
    EmbeddingCoverage { missing: Vec<String> },

    #[error("non-finite value in {what} at row {row}")]
    NonFinite { what: String, row: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("sid capacity exhausted: prefix ({l1},{l2}) holds {group} items but level-{level} has only {capacity} codes")]
    SidCapacity {
        l1: usize,
        l2: usize,
        group: usize,
        level: usize,
        capacity: usize,
    },

    #[error("semantic extraction failed for token {token}: {message}")]
    Extraction { token: String, message: String },

    #[error("corpus build error in task {task}: {message}")]
    CorpusBuild { task: String, message: String },

    #[error("training aborted at step {step}: {message}")]
    Training { step: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
