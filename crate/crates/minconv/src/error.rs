//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are inconsistent with the requested operation.
    Dimension(String),
    /// An estimator or statistic received input it cannot work with
    /// (empty batch, all samples discarded, empty dataset, ...).
    DegenerateInput(String),
    /// Pearson correlation is undefined because one signal has zero variance.
    UndefinedCorrelation,
    /// Weight rescaling hit a filter whose mean absolute value is zero.
    ZeroFilter { filter: usize },
    /// Weight rescaling hit a zero input statistic.
    ZeroInputStats,
    /// Training produced a non-finite loss; carries layer statistics.
    Diverged { epoch: usize, step: usize, diagnostics: String },
    /// Checkpoint does not match the network it is being loaded into.
    IncompatibleCheckpoint(String),
    /// Malformed dataset or checkpoint file.
    Format(String),
    Io(std::io::Error),
    /// Bad command-line or config-file input.
    Usage(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::DegenerateInput(msg) => write!(f, "degenerate input: {msg}"),
            Error::UndefinedCorrelation => {
                write!(f, "correlation undefined: a signal has zero variance")
            }
            Error::ZeroFilter { filter } => {
                write!(f, "filter {filter} is all-zero; weight rescaling is undefined")
            }
            Error::ZeroInputStats => {
                write!(f, "input absolute-mean statistic is zero; rescaling is undefined")
            }
            Error::Diverged { epoch, step, diagnostics } => {
                write!(f, "non-finite loss at epoch {epoch}, step {step}; layer stats: {diagnostics}")
            }
            Error::IncompatibleCheckpoint(msg) => write!(f, "incompatible checkpoint: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
            Error::Usage(msg) => write!(f, "{msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}
