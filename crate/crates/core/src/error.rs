use std::io;

use thiserror::Error;

/// Errors raised by simulation, filtering, the tape VM and the file formats.
#[derive(Debug, Error)]
pub enum Error {
    /// A matrix or vector does not have the dimensions its role requires.
    #[error("configuration error: {what} has shape {got}, expected {expected}")]
    Dimension {
        what: String,
        expected: String,
        got: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("range error: {name} = {value} is outside {allowed}")]
    Range {
        name: &'static str,
        value: f64,
        allowed: &'static str,
    },

    /// Near-singular solve or a nonpositive scalar denominator.
    #[error("numerical error: {message}{}", condition.map(|c| format!(" (condition estimate {c:.3e})")).unwrap_or_default())]
    Numerical {
        message: String,
        condition: Option<f64>,
    },

    /// Static validation failure of a tape program.
    #[error("program validation error at instruction {index}: {message}")]
    Program { index: usize, message: String },

    /// Failure while executing an otherwise valid program.
    #[error("runtime error at instruction {index}: {message}")]
    Runtime { index: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("alignment error at example {id}: {message}")]
    Alignment { id: usize, message: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err(what: impl Into<String>, expected: (usize, usize), got: (usize, usize)) -> Error {
    Error::Dimension {
        what: what.into(),
        expected: format!("{}x{}", expected.0, expected.1),
        got: format!("{}x{}", got.0, got.1),
    }
}
