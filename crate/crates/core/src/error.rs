use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Failures of NPY parsing. Each malformed-input class has its own variant so
/// callers (and tests) can tell them apart.
#[derive(Debug, Error)]
pub enum NpyError {
    #[error("bad magic string (not an NPY file)")]
    BadMagic,
    #[error("unsupported NPY version {major}.{minor} (only 1.0 is accepted)")]
    UnsupportedVersion { major: u8, minor: u8 },
    #[error("unsupported dtype {0:?} (only little-endian <f4 and <f8)")]
    UnsupportedDtype(String),
    #[error("fortran_order arrays are not supported")]
    FortranOrder,
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),
    #[error("eigensolver did not converge after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("npy: {0}")]
    Npy(#[from] NpyError),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps the error with a short description of where it happened.
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// The innermost error beneath any context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of the numerics (non-convergence, NaN, degenerate
    /// spectra) as opposed to bad inputs.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::DegeneratePartition(_) | Error::NoConvergence { .. } | Error::NonFinite(_) => true,
            Error::Context { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    /// Process exit code used by the CLI: 2 for numerical failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.is_numerical() {
            2
        } else {
            1
        }
    }
}
