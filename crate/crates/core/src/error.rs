use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("time {time} of task `{task}` lies outside [0, {period})")]
    TimeOutOfRange { task: String, time: f64, period: f64 },

    #[error("invalid task `{task}`: {reason}")]
    InvalidTask { task: String, reason: String },

    #[error("degenerate series `{0}`: zero variance")]
    DegenerateSeries(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("cholesky factorization failed after jitter {jitter:e}")]
    Factorization { jitter: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("objective decreased at iteration {iteration}: {before} -> {after}")]
    Monotonicity {
        iteration: usize,
        before: f64,
        after: f64,
    },

    #[error("all {0} restarts failed; last error: {1}")]
    AllRestartsFailed(usize, String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("unsupported model document version `{0}`")]
    Version(String),

    #[error("schema violation: {0}")]
    Schema(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
