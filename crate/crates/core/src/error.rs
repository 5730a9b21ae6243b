use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("unknown config id {0}")]
    UnknownConfig(u64),

    #[error("budget {budget} outside [1, {b_max}]")]
    BudgetOutOfRange { budget: usize, b_max: usize },

    #[error("config {0} is already evaluated at the maximum budget")]
    FullyEvaluated(u64),

    #[error("step budget exhausted: need {needed} more steps, {remaining} remaining")]
    BudgetExhausted { needed: usize, remaining: usize },

    #[error("degenerate benchmark: best and worst configurations have equal loss")]
    ZeroSpan,

    #[error("zero variance in ranks")]
    ZeroVariance,

    #[error("snapshot error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
