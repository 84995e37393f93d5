use alloc::string::String;

use thiserror::Error;

/// Errors raised by the numeric core, the model and the statistics routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("attention group {group} has no valid key")]
    AllKeysMasked { group: usize },
    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("zero-norm vector in {0}")]
    ZeroVector(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("patient has no observed modality")]
    NoObservedModality,
    #[error("empty batch")]
    EmptyBatch,
    #[error("pooling group {0} has no reliable token")]
    NoReliableToken(usize),
    #[error("need {wanted} distinct event times for time bins, found {found}")]
    DegenerateBins { wanted: usize, found: usize },
    #[error("no comparable pairs")]
    NoComparablePairs,
    #[error("only one class present")]
    SingleClass,
    #[error("monotone likelihood: {0}")]
    Separation(String),
    #[error("insufficient group: {0}")]
    InsufficientGroup(String),
    #[error("backbone parameters changed during linear probing")]
    FreezeViolated,
}

pub type Result<T> = core::result::Result<T, Error>;
