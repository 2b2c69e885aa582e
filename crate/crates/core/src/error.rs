use std::path::PathBuf;

use numerics::NumericsError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("{param} = {value} outside [{min}, {max}]")]
    DeviceOutOfBounds {
        param: &'static str,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}: expected length {expected}, got {found}")]
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("signal length {0} is not a power of two")]
    NotPowerOfTwo(usize),

    #[error("need at least {needed} rows, got {found}")]
    TooFewRows { needed: usize, found: usize },

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{}:{line}: {msg}", path.display())]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    ModelKind { expected: String, found: String },

    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },

    #[error("epoch {epoch} outside [0, {epochs})")]
    EpochOutOfRange { epoch: usize, epochs: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("json")]
    Json(#[from] serde_json::Error),

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}
