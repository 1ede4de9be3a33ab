use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate input: {what} at row {row} has zero norm")]
    Degenerate { what: &'static str, row: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("infeasible configuration: {0}")]
    Infeasible(String),

    #[error("label {label} out of range for {k} classes (sample {sample})")]
    LabelOutOfRange { sample: usize, label: usize, k: usize },

    #[error("classes without samples: {0:?}")]
    MissingClasses(Vec<usize>),

    #[error("invalid loss specification: {0}")]
    InvalidSpec(String),

    #[error("invalid class counts: {0}")]
    InvalidCounts(String),

    #[error("numeric overflow: {0}")]
    Overflow(String),

    #[error("coincident rows {0} and {1}: Riesz energy is singular")]
    Singular(usize, usize),

    #[error("optimization diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("i/o: {0}")]
    Io(String),

    #[error("parse error: {0}")]
    Parse(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for failures caused by floating-point blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Overflow(_) | Error::Divergence { .. } | Error::Singular(..))
    }
}
