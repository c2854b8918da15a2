use thiserror::Error;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate spatial dims {0}")]
    DegenerateSpatial(Shape),

    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },

    #[error("channel mismatch in {op}: expected {expected}, got {got}")]
    ChannelMismatch { op: &'static str, expected: usize, got: usize },

    #[error("invalid dims: {0}")]
    InvalidDims(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be scalar (1,1,1,1), got {0}")]
    NonScalarLoss(Shape),

    #[error("backward already ran on this graph; call zero_grad before running it again")]
    GradientsNotReset,

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("unsupported rank {0}, only rank 4 is stored")]
    BadRank(u8),

    #[error("unknown dtype code {0}")]
    UnknownDType(u8),

    #[error("dtype mismatch: expected {expected}, found {found}")]
    DTypeMismatch { expected: &'static str, found: &'static str },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("checkpoint config hash does not match the current configuration")]
    ConfigHashMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable numeric code, used by the CLI when reporting decode failures.
    pub fn code(&self) -> u32 {
        match self {
            Error::DegenerateSpatial(_) => 10,
            Error::ShapeMismatch { .. } => 11,
            Error::ChannelMismatch { .. } => 12,
            Error::InvalidDims(_) => 13,
            Error::NonFinite(_) => 20,
            Error::NonScalarLoss(_) => 21,
            Error::GradientsNotReset => 22,
            Error::UnknownParam(_) => 23,
            Error::BadMagic { .. } => 30,
            Error::UnsupportedVersion(_) => 31,
            Error::BadRank(_) => 32,
            Error::UnknownDType(_) => 33,
            Error::DTypeMismatch { .. } => 34,
            Error::Truncated(_) => 35,
            Error::ConfigHashMismatch => 36,
            Error::Config(_) => 40,
            Error::Io(_) => 50,
        }
    }
}
