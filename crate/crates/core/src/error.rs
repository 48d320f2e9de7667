use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A value violates a probability, simplex, or design constraint.
    #[error("constraint violated: {0}")]
    Constraint(String),

    /// Vector or matrix lengths do not agree with the study design.
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    /// The likelihood is undefined at this point (e.g. N < n).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("model structure: {0}")]
    Structure(String),

    /// Parameter set cannot be written in terms of the given structure.
    #[error("parameter set is not representable by this structure: {0}")]
    NotRepresentable(String),

    #[error("hidden path space has {size} paths, above the limit of {limit}")]
    PathSpaceTooLarge { size: u128, limit: u128 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn constraint(msg: impl Into<String>) -> Self {
        Error::Constraint(msg.into())
    }

    pub(crate) fn dim(what: impl Into<String>, expected: usize, got: usize) -> Self {
        Error::Dimension {
            what: what.into(),
            expected,
            got,
        }
    }
}
