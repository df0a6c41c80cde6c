use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("coefficient count mismatch: {coeffs} coefficients for {vectors} task vectors")]
    CoefficientCount { coeffs: usize, vectors: usize },

    #[error("coefficients are not on the probability simplex: {0}")]
    Simplex(String),

    #[error("degenerate coefficient: lambda[{index}] = 0")]
    DegenerateCoefficient { index: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty parameter vector")]
    EmptyDim,

    #[error("bad magic: expected \"MRGL\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("{extra} trailing bytes after payload")]
    TrailingBytes { extra: usize },

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("diverged at step {step}: iterate norm {norm:e}")]
    Diverged { step: usize, norm: f64 },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// True for errors that signal a collapsed (diverged) training run.
    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Diverged { .. })
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}
