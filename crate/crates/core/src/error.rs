use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("singular design: collinear columns {}", .columns.join(", "))]
    SingularDesign { columns: Vec<String> },

    #[error("{model} did not converge after {iterations} iterations (last objective {objective})")]
    NonConvergence {
        model: String,
        iterations: usize,
        objective: f64,
        last_iterate: Vec<f64>,
    },

    #[error("unknown hospital label `{0}`")]
    UnknownHospital(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("unsupported family: {0}")]
    UnsupportedFamily(String),

    #[error("too many failed fits: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },

    #[error("unknown component `{0}`")]
    UnknownComponent(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for numerical failures, 2 for configuration or
    /// data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularDesign { .. } | Error::NonConvergence { .. } | Error::TooManyFailures { .. } => 1,
            _ => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::SingularDesign { .. } => "singular_design",
            Error::NonConvergence { .. } => "non_convergence",
            Error::UnknownHospital(_) => "unknown_hospital",
            Error::Dimension(_) => "dimension",
            Error::Precondition(_) => "precondition",
            Error::UnsupportedFamily(_) => "unsupported_family",
            Error::TooManyFailures { .. } => "too_many_failures",
            Error::UnknownComponent(_) => "unknown_component",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
