use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Each variant maps onto one failure class; the CLI turns them into exit
/// codes (see [`Error::exit_code`]).
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or extents that cannot be combined.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An invalid configuration value (architecture, plan, sampler, schedule).
    #[error("configuration error: {0}")]
    Config(String),
    /// A call that breaks an API contract (duplicate head, missing head, non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),
    /// A class label outside `[0, num_classes)`.
    #[error("label error at row {row}: label {label} not in [0, {num_classes})")]
    Label { row: usize, label: i64, num_classes: usize },
    /// A malformed line in a text manifest.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    /// Well-formed input whose content is not acceptable.
    #[error("validation error: {0}")]
    Validation(String),
    /// Unrecognized binary format.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// The model lacks a feature the operation needs (e.g. attention maps).
    #[error("capability error: {0}")]
    Capability(String),
    /// A non-finite loss or gradient during training.
    #[error("numerical abort at step {step}: {msg}")]
    Numerical { step: usize, msg: String },
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error: 2 configuration, 3 capability, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Parse { .. }
            | Error::Validation(_)
            | Error::Label { .. }
            | Error::Contract(_) => 2,
            Error::Capability(_) => 3,
            Error::Numerical { .. } => 4,
            _ => 1,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::Error::Contract(format!($($arg)*)) };
}
pub(crate) use {config_err, contract_err, dim_err};
