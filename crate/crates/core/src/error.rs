use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Two score vectors whose AUROC difference has zero variance.
    #[error("degenerate comparison: {0}")]
    DegenerateComparison(String),

    #[error("edge source `{0}` is not available in this cohort")]
    UnavailableEdgeSource(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Error::Shape { op, detail }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::UnavailableEdgeSource(_)
            | Error::Io { .. }
            | Error::Json(_)
            | Error::Csv(_) => 3,
            Error::Shape { .. } | Error::Numeric(_) | Error::DegenerateComparison(_) => 4,
        }
    }
}
