use thiserror::Error;

/// Errors raised by the modeling crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing metadata for unit `{unit}`{}", .cycle.map(|c| format!(" (cycle {c})")).unwrap_or_default())]
    MissingMetadata { unit: String, cycle: Option<u32> },

    #[error("grid mismatch: expected {expected} points, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("degenerate covariance: all eigenvalues are (numerically) zero")]
    DegenerateCovariance,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular fixed-effects design; collinear columns: {}", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("singular penalized system: {0}; try a larger smoothing parameter")]
    SingularSystem(String),

    #[error("unknown unit `{0}` and population-level prediction not requested")]
    UnknownUnit(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Wrap an error with the name of the pipeline stage that raised it.
    pub fn at_stage(self, stage: &str) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
