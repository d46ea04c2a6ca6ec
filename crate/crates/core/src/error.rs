use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by ingestion, transforms and estimators.
///
/// Variants are split into input problems (bad files, malformed values,
/// invalid configuration) and estimation problems (degenerate samples,
/// solver failures). [`Error::is_input_error`] tells the two apart.
#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },

    #[error("malformed period '{0}' (expected YYYY-MM or YYYY)")]
    MalformedPeriod(String),

    #[error("duplicate cell for unit '{unit}' at {period}")]
    DuplicateCell { unit: String, period: String },

    #[error("period axis is not contiguous: no observations for {missing}")]
    NonContiguous { missing: String },

    #[error("unknown unit '{0}'")]
    UnknownUnit(String),

    #[error("negative accident count for unit '{unit}' at {period}")]
    NegativeCount { unit: String, period: String },

    #[error("zero accident count for unit '{unit}' at {period}")]
    ZeroCount { unit: String, period: String },

    #[error("missing value: {0}")]
    MissingValue(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("fixed effects graph is disconnected ({components} components)")]
    Disconnected { components: usize },

    #[error("{what} did not converge after {iterations} iterations")]
    NotConverged { what: String, iterations: usize },

    #[error("separation: {0} has only zero counts")]
    Separation(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("empty support: {0}")]
    EmptySupport(String),

    #[error("estimation failed: {0}")]
    Estimation(String),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn estimation(msg: impl Into<String>) -> Self {
        Error::Estimation(msg.into())
    }

    /// True for problems with the supplied data or configuration, as opposed
    /// to failures of an estimator on valid input.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Csv { .. }
                | Error::MalformedPeriod(_)
                | Error::DuplicateCell { .. }
                | Error::NonContiguous { .. }
                | Error::UnknownUnit(_)
                | Error::NegativeCount { .. }
                | Error::MissingValue(_)
                | Error::Invalid(_)
        )
    }
}
