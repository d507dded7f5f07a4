use std::path::PathBuf;

/// Errors raised anywhere in the engine or the pipeline built on it.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {what}")]
    InvalidShape { what: String, shape: Vec<usize> },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("timestep {t} outside [0, {total})")]
    TimestepOutOfRange { t: usize, total: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{path}:{line}: field `{field}`: {message}")]
    Parse {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("coordinate ({x}, {y}) outside the {width}x{height} image")]
    CoordinateOutOfRange {
        x: f64,
        y: f64,
        width: usize,
        height: usize,
    },

    #[error("malformed {kind} file: {message}")]
    Format { kind: &'static str, message: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
