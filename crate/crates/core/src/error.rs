use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum CapError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate id {id:?} at index {index}")]
    DuplicateId { id: String, index: usize },

    #[error("near-zero vector at index {index} (norm {norm:e})")]
    NearZeroVector { index: usize, norm: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: &'static str, index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("length mismatch: {what} has {actual} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("version mismatch: file has version {found}, reader supports {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("unknown dtype flag {0}")]
    UnknownDtype(u8),

    #[error("truncated {section}: expected {expected} bytes, found {actual}")]
    Truncated {
        section: &'static str,
        expected: u64,
        actual: u64,
    },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("k={k} too large: only {available} candidates")]
    KTooLarge { k: usize, available: usize },

    #[error("k must be at least 1")]
    KZero,

    #[error("exclude index {index} out of range for bank of {len}")]
    ExcludeOutOfRange { index: usize, len: usize },

    #[error("zero-norm query (norm {norm:e})")]
    ZeroNormQuery { norm: f64 },

    #[error("non-finite attention logits in row {row}")]
    NonFiniteLogits { row: usize },

    #[error("non-finite gradient for {param} at batch sample {sample}")]
    NonFiniteGradient { param: &'static str, sample: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("labels must contain both classes")]
    SingleClass,

    #[error("label {label} at index {index} is not 0 or 1")]
    BadLabel { index: usize, label: u8 },

    #[error("upsample target {target_h}x{target_w} smaller than source {source_h}x{source_w}")]
    UpsampleTooSmall {
        source_h: usize,
        source_w: usize,
        target_h: usize,
        target_w: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CapError {
    /// Whether the error stems from numerical breakdown rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CapError::NonFiniteLogits { .. }
                | CapError::NonFiniteGradient { .. }
                | CapError::NonFiniteLoss { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, CapError>;
