use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A scale fell outside the E8M0 exponent range.
    #[error("scale {value} is outside the E8M0 range [2^{min}, 2^{max}]")]
    ScaleRange { value: f64, min: i32, max: i32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("signal power is zero; SNR is undefined")]
    UndefinedSignal,

    #[error("shape error: {0}")]
    Shape(String),

    #[error("inference failed at node {node}: {msg}")]
    Inference { node: usize, msg: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error("eval error: {0}")]
    Eval(String),

    #[error("scalify: no scale rule for `{primitive}` with scaled inputs")]
    NoScaleRule { primitive: String },

    #[error("scalify: {0}")]
    Transform(String),

    #[error("scale discipline violated at {at}: {value} is not a finite power of two")]
    NotPow2 { at: String, value: f64 },

    #[error("autodiff: {0}")]
    Grad(String),

    #[error("non-finite values in `{path}`")]
    NonFinite { path: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
