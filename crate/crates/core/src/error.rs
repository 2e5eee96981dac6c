use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed row in an input file. `line` is 1-based and counts the header.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Calendar structure problems such as gaps or unordered dates.
    #[error("structural error: {0}")]
    Structure(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate channel `{0}`: standard deviation is zero")]
    DegenerateChannel(String),

    #[error("degenerate observations: observed standard deviation is zero")]
    DegenerateObservation,

    /// Caller violated a function contract (arity, minimum lengths, shapes).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric fault at {location}: {message}")]
    NumericFault { location: String, message: String },

    #[error("syntax error at byte {offset}: {message}")]
    Syntax { offset: usize, message: String },

    #[error("semantic error: {0}")]
    Semantic(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn fault_at_step(step: usize, message: impl Into<String>) -> Self {
        Error::NumericFault {
            location: format!("timestep {step}"),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than numerics or plans.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Structure(_)
                | Error::Validation(_)
                | Error::InsufficientData(_)
                | Error::DegenerateChannel(_)
                | Error::DegenerateObservation
                | Error::Contract(_)
                | Error::Syntax { .. }
                | Error::Semantic(_)
                | Error::Report(_)
        )
    }
}
