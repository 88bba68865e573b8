use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the model.
///
/// The variants fall into three families (configuration, data and numerical)
/// so that front ends can map them onto distinct exit codes via [`Error::kind`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),

    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },

    #[error("invalid metric parameters: {0}")]
    InvalidMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("singular Gauss-Newton system in {0}")]
    SingularSystem(&'static str),

    #[error("rank-deficient subspace: mode {mode} has L-norm eigenvalue {eigenvalue:e}")]
    RankDeficient { mode: usize, eigenvalue: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverNotConverged { iterations: usize, residual: f64 },

    #[error("malformed field file {path:?}: {reason}")]
    FieldFormat { path: PathBuf, reason: String },

    #[error("I/O error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path:?}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Coarse classification of an [`Error`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidMetric(_) | Error::Config(_) => ErrorKind::Config,
            Error::InvalidLattice(_)
            | Error::LatticeMismatch(_)
            | Error::ChannelMismatch { .. }
            | Error::Data(_)
            | Error::FieldFormat { .. }
            | Error::Json { .. } => ErrorKind::Data,
            Error::NonFinite(_)
            | Error::SingularSystem(_)
            | Error::RankDeficient { .. }
            | Error::SolverNotConverged { .. } => ErrorKind::Numerical,
            Error::Io { .. } => ErrorKind::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
