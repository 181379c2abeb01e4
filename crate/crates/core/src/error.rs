use std::fmt;

/// Crate-wide error type.
///
/// Every fallible operation reports which contract it violated; shape errors
/// always name both offending shapes.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible tensor shapes or grid dimensions.
    Dim { op: &'static str, detail: String },
    /// Invalid configuration (divisibility, ranges, unknown keys).
    Config { detail: String },
    /// Non-finite values where finite ones are required.
    Numeric { op: &'static str, detail: String },
    /// An API precondition was violated (e.g. non-scalar loss).
    Contract { detail: String },
    /// Out-of-range index (token ids, targets).
    Index { detail: String },
    /// Sequence exceeds the configured maximum length.
    Length { detail: String },
    /// A corpus metric is undefined on this input (empty corpus, no trigrams).
    UndefinedMetric { detail: String },
    /// Training produced a non-finite loss.
    Divergence { step: usize },
    /// File I/O failure.
    Io { detail: String },
    /// Malformed input file (PPM, NTAT, JSON lines).
    Parse { detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Config { detail } => write!(f, "config error: {detail}"),
            Error::Numeric { op, detail } => write!(f, "numeric error in {op}: {detail}"),
            Error::Contract { detail } => write!(f, "contract error: {detail}"),
            Error::Index { detail } => write!(f, "index error: {detail}"),
            Error::Length { detail } => write!(f, "length error: {detail}"),
            Error::UndefinedMetric { detail } => write!(f, "undefined metric: {detail}"),
            Error::Divergence { step } => write!(f, "divergence: non-finite loss at step {step}"),
            Error::Io { detail } => write!(f, "i/o error: {detail}"),
            Error::Parse { detail } => write!(f, "parse error: {detail}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(value: std::io::Error) -> Self {
        Error::Io {
            detail: value.to_string(),
        }
    }
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config {
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op,
            detail: detail.into(),
        }
    }
}
