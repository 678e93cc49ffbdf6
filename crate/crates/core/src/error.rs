//! Crate-wide error type.
//!
//! Variants are grouped by what the caller can do about them: `Param` and
//! `Dim` are programming or configuration mistakes, `Io`/`Parse` are input
//! problems, and the remaining variants are domain conditions that a caller
//! may want to handle individually (a degenerate industry, an empty city
//! system, a singular regression design).

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter is outside its admissible range.
    #[error("invalid parameter {name}: {message}")]
    Param { name: &'static str, message: String },

    /// Array shapes or index bounds do not line up.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// An industry carries no workers anywhere, so market access and wages
    /// are undefined for it.
    #[error("industry {industry} has zero mass everywhere; market access is undefined")]
    DegenerateIndustry { industry: usize },

    /// No location qualifies as a city at the given threshold.
    #[error("no location exceeds the city threshold {threshold}")]
    EmptySystem { threshold: f64 },

    /// A regression design matrix is singular; for the common-power-law fit
    /// this names the offending partition cell.
    #[error("singular design: {0}")]
    Singular(String),

    /// A rank statistic is undefined because one of the inputs has no
    /// variation.
    #[error("degenerate rank statistic: {0}")]
    DegenerateRanks(String),

    /// Numeric failure during a solve or a statistic (overflow, non-finite
    /// intermediate, or an iteration budget exhausted where a result is
    /// mandatory).
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed input text (config file, elasticity pool, city table).
    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, message: impl Into<String>) -> Self {
        Error::Param { name, message: message.into() }
    }

    pub(crate) fn dim(message: impl Into<String>) -> Self {
        Error::Dim(message.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { context: context.into(), source }
    }

    pub(crate) fn parse(file: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse { file: file.into(), line, message: message.into() }
    }
}
