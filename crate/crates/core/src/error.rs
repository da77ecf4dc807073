//! Crate-wide error type.

use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {msg}")]
    MalformedLine { line: usize, msg: String },

    #[error("unknown strategy `{code}` at line {line}")]
    UnknownStrategy { code: String, line: usize },

    #[error("unknown emotion `{code}` at line {line}")]
    UnknownEmotion { code: String, line: usize },

    #[error("empty field `{field}` at line {line}")]
    EmptyField { field: &'static str, line: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("split count mismatch: {0}")]
    SplitMismatch(String),

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("token id {0} is out of vocabulary range")]
    UnknownTokenId(u32),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence length {len} exceeds maximum {max}")]
    Overlength { len: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("stage contract violated: {0}")]
    Stage(String),

    #[error("lineage violation: {0}")]
    Lineage(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("unknown scorer `{0}`")]
    UnknownScorer(String),

    #[error("degenerate: {0}")]
    Degenerate(String),

    #[error("refusing to overwrite existing file {0} (pass --force)")]
    Exists(PathBuf),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable tag for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::MalformedLine { .. }
            | Error::UnknownStrategy { .. }
            | Error::UnknownEmotion { .. }
            | Error::EmptyField { .. } => "data",
            Error::EmptyDataset | Error::EmptyInput(_) => "empty",
            Error::SplitMismatch(_) => "split_mismatch",
            Error::UnknownToken(_) | Error::UnknownTokenId(_) => "vocabulary",
            Error::Config(_) => "config",
            Error::Shape(_) | Error::Overlength { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Stage(_) => "stage",
            Error::Lineage(_) => "lineage",
            Error::NonFinite { .. } => "non_finite",
            Error::Checkpoint(_) => "checkpoint",
            Error::UnknownScorer(_) => "scorer",
            Error::Degenerate(_) => "degenerate",
            Error::Exists(_) => "exists",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
