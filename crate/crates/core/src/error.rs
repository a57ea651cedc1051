use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("input `{0}` is not bound")]
    Unbound(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("graph output must be a scalar, got dims {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph has no designated output")]
    NoOutput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("mapping matrix is singular or ill-conditioned (condition number {0:e})")]
    Singular(f64),
    #[error("zero-norm vector cannot be projected onto the sphere")]
    ZeroVector,
    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },
    #[error("I/O failure on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
