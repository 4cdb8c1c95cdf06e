use std::path::PathBuf;
use thiserror::Error;

/// Crate-wide error type. The CLI maps variants onto process exit codes,
/// so every failure mode must stay classifiable.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dim(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("{}: {source}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("training failure at iteration {iteration}: {msg}")]
    Training { iteration: usize, msg: String },

    #[error("metric error: {0}")]
    Metric(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error("usage error: {0}")]
    Usage(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code contract: 1 for usage or configuration mistakes, 2 for
    /// data and format problems, 3 for training failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Training { .. } => 3,
            _ => 2,
        }
    }
}

/// Wraps an io::Error with the offending path so CLI messages name the file.
pub fn file_err(path: &std::path::Path, source: std::io::Error) -> Error {
    Error::File { path: path.to_path_buf(), source }
}
