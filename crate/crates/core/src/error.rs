use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    /// The d×d matrix `I + Λ'Ψ⁻¹Λ` could not be factorized reliably.
    #[error("inner factor matrix is numerically singular (rcond estimate {rcond:e})")]
    SingularInnerMatrix { rcond: f64 },

    #[error("all truncation values are zero; no positive threshold exists")]
    DegenerateThreshold,

    #[error("component {component} is empty (n_g = {mass:e})")]
    EmptyComponent { component: usize, mass: f64 },

    #[error("mixture density underflowed for observation {index}")]
    DensityUnderflow { index: usize },

    #[error("factor posterior matrix for component {component} is singular")]
    SingularXi { component: usize },

    #[error("initialization regression matrix stayed singular after {retries} retries")]
    SingularInit { retries: usize },

    #[error("all {n_starts} starts failed: {causes:?}")]
    AllStartsFailed { n_starts: usize, causes: Vec<String> },

    #[error("csv error at row {row}, column {column}: {message}")]
    Csv {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("scenario file line {line}: {message}")]
    Scenario { line: usize, message: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("io error: {0}")]
    Io(String),

    #[error("json error: {0}")]
    Json(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
