use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit-code classes:
/// `Config` is a configuration problem, `Io` an I/O failure, and everything
/// else a data/model contract violation.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape mismatch, naming the offending axis.
    #[error("dimension error: {0}")]
    Dim(String),

    /// Invalid parameter value (probabilities out of range, N_s < 1, ...).
    #[error("parameter error: {0}")]
    Param(String),

    /// Violated API contract (non-scalar loss, undefined variance, ...).
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid network specification.
    #[error("network spec error: {0}")]
    Spec(String),

    /// Mask label outside the valid class range.
    #[error("label error: {0}")]
    Label(String),

    /// Dataset or split too small / empty.
    #[error("size error: {0}")]
    Size(String),

    /// Decision rule cannot be applied (zero class frequency under ML).
    #[error("decision rule error: {0}")]
    Rule(String),

    /// Metric is undefined on the given input (degenerate AUROC).
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Malformed file, naming the offending field.
    #[error("format error ({field}): {msg}")]
    Format { field: &'static str, msg: String },

    /// Synthetic generator could not satisfy its targets.
    #[error("generation error: {0}")]
    Generation(String),

    /// Report assembly failure (mismatched class counts, empty input).
    #[error("report error: {0}")]
    Report(String),

    /// Bad run configuration (unknown key, unparsable value).
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub(crate) fn format(field: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            field,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
