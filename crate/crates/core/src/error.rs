use thiserror::Error;

/// Errors produced by the gsir library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("quality grid {got_rows}x{got_cols} does not match patch grid {expected_rows}x{expected_cols}")]
    GridMismatch {
        expected_rows: usize,
        expected_cols: usize,
        got_rows: usize,
        got_cols: usize,
    },

    #[error("stage budget exceeded: stage {stage} requested with {budget} stages configured")]
    StageBudgetExceeded { stage: usize, budget: usize },

    #[error("refinement requires at least one step")]
    InvalidSteps,

    #[error("training corpus is empty")]
    EmptyCorpus,

    #[error("range derivation needs a non-empty gaussian set")]
    EmptySet,

    #[error("distill correspondence violated: prediction has {predicted} primitives, target has {target}")]
    Correspondence { predicted: usize, target: usize },

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Container-level decoding failures. Each case is distinct so callers can
/// report them verbatim.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated stream: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("malformed stream: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, Error>;
