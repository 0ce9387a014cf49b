use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is invalid. `key` names the offending setting.
    #[error("configuration error at `{key}`: {message}")]
    Config { key: String, message: String },

    /// A caller broke an operation's precondition (shapes, widths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced a non-finite or singular value.
    #[error("numeric failure in `{param}`: {detail}")]
    Numeric { param: String, detail: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Two keyed collections could not be aligned.
    #[error("join error: {} missing key(s): {}", .0.len(), .0.join(", "))]
    Join(Vec<String>),

    /// Probe train and test rows share subjects.
    #[error("subject leakage between probe train and test: {0:?}")]
    Leakage(Vec<u64>),

    #[error("format error: {0}")]
    Format(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        Error::Contract(message.into())
    }

    pub fn numeric(param: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            param: param.into(),
            detail: detail.into(),
        }
    }
}
