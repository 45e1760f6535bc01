use thiserror::Error;

use crate::io::ArchiveError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor size overflows usize for dims {0:?}")]
    SizeOverflow([usize; 4]),

    #[error("{what} = {value} is not divisible by {divisor}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        divisor: usize,
    },

    #[error("execution plan does not match the dilation matrix: {0}")]
    PlanMismatch(String),

    #[error("unknown architecture `{0}` (expected resnet50, resnet101, resnext50_32x4d or resnext101_32x4d)")]
    UnknownArch(String),

    #[error("layer `{0}` has all-zero weights; proportions are undefined")]
    DegenerateLayer(String),

    #[error("layer `{0}` not found in archive")]
    MissingLayer(String),

    #[error("archive contains no analyzable layers")]
    EmptyArchive,

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Archive(#[from] ArchiveError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
