//! Shared error type for the core library.

use std::fmt;

/// Errors raised by the numerical core.
#[derive(Debug)]
pub enum Error {
    /// Operand shapes do not conform for the named operation.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A value left the domain of an operation (log of non-positive, etc).
    Domain(String),
    /// A matrix that must be symmetric positive definite is not.
    NotPositiveDefinite { min_eigenvalue: f64 },
    /// An iterative routine failed to converge.
    NoConvergence(String),
    /// Numerical blowup during integration or training.
    Blowup { context: String, step: usize },
    /// Training diverged (non-finite loss or gradient).
    Divergence {
        step: usize,
        loss: f64,
        grad_norm: f64,
    },
    /// Invalid argument or configuration value.
    Invalid(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file failed structural validation (bad magic, truncation, version).
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "shape mismatch in {op}: {lhs:?} vs {rhs:?}")
            }
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::NotPositiveDefinite { min_eigenvalue } => {
                write!(
                    f,
                    "matrix is not positive definite (smallest eigenvalue {min_eigenvalue:.3e})"
                )
            }
            Error::NoConvergence(msg) => write!(f, "failed to converge: {msg}"),
            Error::Blowup { context, step } => {
                write!(f, "numerical blowup in {context} at step {step}")
            }
            Error::Divergence {
                step,
                loss,
                grad_norm,
            } => write!(
                f,
                "training diverged at step {step} (loss {loss:.3e}, grad norm {grad_norm:.3e})"
            ),
            Error::Invalid(msg) => write!(f, "invalid argument: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Corrupt(msg) => write!(f, "corrupt file: {msg}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
