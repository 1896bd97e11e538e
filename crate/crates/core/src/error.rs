use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimMismatch { expected: [usize; 3], got: [usize; 3] },

    #[error("non-finite sample coordinate")]
    NonFiniteCoordinate,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty region")]
    EmptyRegion,

    #[error("variance needs >= 2 samples")]
    InsufficientSamples,

    #[error("tape mismatch: {0}")]
    TapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bad magic: {0:?}")]
    BadMagic(String),

    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLengthMismatch { expected: usize, found: usize },

    #[error("malformed header: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by NaN/Inf appearing in a numeric pipeline.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
