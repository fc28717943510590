//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch in a tensor op; carries the op name and both shapes.
    #[error("shape mismatch in `{op}`: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Matrix inversion hit a (numerically) singular system.
    #[error("singular matrix in `{op}` (condition estimate {cond:.3e})")]
    Singular { op: &'static str, cond: f64 },

    /// An API contract was violated (non-scalar loss, empty mask, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration value; `pointer` is a JSON pointer into the config.
    #[error("config error at `{pointer}`: {msg}")]
    Config { pointer: String, msg: String },

    /// A file did not match its expected binary format.
    #[error("format error: {0}")]
    Format(String),

    /// Checksum or length check failed while reading a file.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Parse failure in a text or image format, with a byte offset when known.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },

    /// Non-finite value encountered during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation attempted in an invalid state (empty buffer, spent tape, ...).
    #[error("state error: {0}")]
    State(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(pointer: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            pointer: pointer.into(),
            msg: msg.into(),
        }
    }
}
