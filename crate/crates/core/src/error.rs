use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed input row. `row` is 1-based and counts the header as row 1.
    #[error("row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("{0}")]
    Config(String),

    #[error("rule {rule}: {message}")]
    Rule { rule: String, message: String },

    #[error("value {value} outside [{low}, {high}]")]
    Domain { value: f64, low: f64, high: f64 },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("duplicate entry: {0}")]
    Duplicate(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("cluster model fitted at {fit_month} is stale for {month} (refit period {refit_period} months); run `train` again to refit")]
    StaleModel {
        fit_month: String,
        month: String,
        refit_period: u32,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category tag used on the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Rule { .. } => "rule",
            Error::Domain { .. } => "domain",
            Error::NotFound(_) => "not-found",
            Error::Duplicate(_) => "duplicate",
            Error::InsufficientData(_) => "insufficient-data",
            Error::StaleModel { .. } => "refit-required",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Serialization(_) => "serialization",
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
