use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("manifest format error: {0}")]
    Format(String),

    #[error("duplicate subject_id '{subject_id}' at row {row}")]
    DuplicateSubject { subject_id: String, row: usize },

    #[error("mmse value {value} out of range [0, 30] at row {row}")]
    ScoreRange { value: i64, row: usize },

    #[error("degenerate score range: {0}")]
    DegenerateRange(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported audio format in {path}: {reason}")]
    UnsupportedFormat { path: PathBuf, reason: String },

    #[error("corrupt audio file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("backend '{backend}' failed: {message}")]
    Backend { backend: String, message: String },

    #[error("backend '{backend}' timed out after {seconds} s")]
    Timeout { backend: String, seconds: u64 },

    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("cannot parse backend output: {0}")]
    Parse(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Diverged { epoch: usize },

    #[error("degenerate labels: {0}")]
    DegenerateLabels(String),

    #[error("missing stage output {}", .0.display())]
    MissingStageOutput(PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("{stage} stage failed for {failed} of {total} items (see {})", .manifest.display())]
    StageFailures {
        stage: String,
        failed: usize,
        total: usize,
        manifest: PathBuf,
    },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", .path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}
