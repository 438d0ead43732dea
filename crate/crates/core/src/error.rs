use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },
    #[error("loss has no non-ignored positions")]
    EmptyLoss,
    #[error("index {index} out of range (bound {bound}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("context budget exceeded: {needed} positions requested, budget is {budget}")]
    Budget { needed: usize, budget: usize },
    #[error("decode state does not belong to this model: {0}")]
    StateMismatch(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("unknown item ids: {0:?}")]
    UnknownItems(Vec<String>),
    #[error("{path}:{line}: malformed row: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("unsupported artifact version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("artifact {artifact} was produced by config {found}, current config is {expected} (use --force to override)")]
    ConfigHash {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-parsable category used by the command line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::Axis { .. } | Error::NotScalar(_) => "shape",
            Error::EmptyLoss | Error::Empty(_) => "empty",
            Error::Index { .. } => "index",
            Error::NonFinite(_) => "numeric",
            Error::Budget { .. } => "budget",
            Error::StateMismatch(_) => "state",
            Error::Invalid(_) => "invalid",
            Error::UnknownItems(_) => "unknown-item",
            Error::Malformed { .. } => "malformed",
            Error::Degenerate(_) => "degenerate",
            Error::Corrupt { .. } => "corrupt",
            Error::Version { .. } => "version",
            Error::Config(_) => "config",
            Error::ConfigHash { .. } => "config-hash",
            Error::Io { .. } => "io",
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
