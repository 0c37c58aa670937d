use thiserror::Error;

pub type Result<T> = std::result::Result<T, RsdError>;

#[derive(Debug, Error)]
pub enum RsdError {
    /// A caller broke an operation's precondition (shape, range, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("fit diverged at step {step}: {detail}")]
    FitDivergence { step: usize, detail: String },

    #[error("encoder produced a non-finite output for item {item}")]
    NonFiniteEncoder { item: usize },

    #[error("degenerate objective: {0}")]
    DegenerateObjective(String),

    #[error("degenerate fixture: {0}")]
    DegenerateFixture(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("assertion failed: {0}")]
    Assertion(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(RsdError::Contract(msg()))
    }
}
