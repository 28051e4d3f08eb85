use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not on this tape")]
    UnknownNode(usize),

    #[error("resolution {h}x{w} is too small (minimum 8x8)")]
    BadResolution { h: usize, w: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("grid {n_y}x{n_z} too small: both sides must be at least 2")]
    GridTooSmall { n_y: usize, n_z: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("unknown base generator kind `{0}`")]
    UnknownKind(String),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("config error in `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, one per variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "SHAPE_MISMATCH",
            Error::Domain(_) => "DOMAIN",
            Error::NonScalarLoss(_) => "NON_SCALAR_LOSS",
            Error::UnknownNode(_) => "UNKNOWN_NODE",
            Error::BadResolution { .. } => "BAD_RESOLUTION",
            Error::LengthMismatch { .. } => "LENGTH_MISMATCH",
            Error::GridTooSmall { .. } => "GRID_TOO_SMALL",
            Error::EmptyBatch => "EMPTY_BATCH",
            Error::UnknownKind(_) => "UNKNOWN_KIND",
            Error::ArchitectureMismatch(_) => "ARCHITECTURE_MISMATCH",
            Error::Config { .. } => "CONFIG",
            Error::Format { .. } => "FORMAT",
            Error::InvalidArgument(_) => "INVALID_ARGUMENT",
            Error::Io(_) => "IO",
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config { field: field.into(), msg: msg.into() }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
