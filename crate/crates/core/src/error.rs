use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("series is empty")]
    EmptySeries,
    #[error("invalid series: {0}")]
    InvalidSeries(String),
    #[error("invalid split fractions: train={train}, val={val}")]
    InvalidFractions { train: f64, val: f64 },
    #[error("series of length {len} is too short for window {window}")]
    WindowTooLong { len: usize, window: usize },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("cholesky factorization failed after jitter {jitter:e}")]
    NotPositiveDefinite { jitter: f64 },
    #[error("unknown segment id {0}")]
    UnknownSegment(usize),
    #[error("embedding of sensor {0} has zero norm")]
    ZeroNormEmbedding(usize),
    #[error("top-k {k} out of range for {n} sensors")]
    TopKOutOfRange { k: usize, n: usize },
    #[error("non-finite value at stage {0}")]
    NonFinite(&'static str),
    #[error("variable {0} was not recorded on this tape")]
    UnknownVariable(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("no normalization statistics for sensor {0}")]
    MissingSensorStats(usize),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
