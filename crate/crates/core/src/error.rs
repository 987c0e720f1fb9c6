use alloc::string::String;
use alloc::vec::Vec;

/// Everything that can go wrong inside the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch, expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("batch norm in training mode needs at least 2 values per channel, got {0}")]
    BatchStatistics(usize),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("singular affine transform, |det| = {0:e}")]
    SingularTransform(f64),
    #[error("reconstruction target outside [0, 1]: {0}")]
    Domain(f64),
    #[error("idx: {0}")]
    Idx(#[from] IdxError),
    #[error("requested {requested} samples but only {available} are available")]
    OverRequest { requested: usize, available: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// IDX container decoding failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum IdxError {
    #[error("bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic { expected: u32, found: u32 },
    #[error("truncated: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
