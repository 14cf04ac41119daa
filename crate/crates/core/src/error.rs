use crate::tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("lipschitz loss requested on a network without lipschitz layers")]
    NotLipschitz,
    #[error("dimension mismatch: {0}")]
    Dim(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("unsupported file version {found} (max {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file truncated while reading {0}")]
    Truncated(&'static str),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("guidance error: {0}")]
    Guidance(#[from] crate::guidance::GuidanceError),
    #[error("gradient reached frozen parameter {0}")]
    FrozenGradient(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("gradient check '{0}' exceeded its tolerance")]
    GradientCheck(String),
    #[error("no anchors: every frame was labelled noise")]
    NoAnchors,
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    /// Errors that stem from bad numbers rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Tensor(TensorError::NonFinite { .. }) | Error::Diverged { .. } | Error::FrozenGradient(_) | Error::GradientCheck(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
