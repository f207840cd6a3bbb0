use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("resolution mismatch: {0}")]
    ResolutionMismatch(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("underdetermined projection: {observed} observed rows for a rank-{rank} basis")]
    UnderdeterminedProjection { observed: usize, rank: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("line {line}: {message}")]
    Malformed { line: u64, message: String },

    #[error("unknown road id: {0}")]
    UnknownRoad(String),

    #[error("road ids missing from network: {}", .0.join(", "))]
    RoadsNotInNetwork(Vec<String>),

    #[error("infeasible scenario: {0}")]
    InfeasibleScenario(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} road(s) failed:\n{}", .0.len(), .0.iter().map(|(r, e)| format!("  {r}: {e}")).collect::<Vec<_>>().join("\n"))]
    Roads(Vec<(String, Error)>),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error stems from user-supplied input rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Internal(_) | Error::Json(_) => false,
            Error::Roads(failures) => failures.iter().all(|(_, e)| e.is_input_error()),
            _ => true,
        }
    }

    pub(crate) fn malformed(line: u64, message: impl Into<String>) -> Self {
        Error::Malformed {
            line,
            message: message.into(),
        }
    }
}
