use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite weight")]
    NonFiniteWeight,

    #[error("code {code} out of range for {bits}-bit grid")]
    CodeOutOfRange { code: u32, bits: u8 },

    #[error("invalid bit-width: {0}")]
    InvalidBits(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty group")]
    EmptyGroup,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate calibration")]
    DegenerateCalibration,

    #[error("factorization failed")]
    FactorizationFailed,

    #[error("numerical blowup in column {column}")]
    NumericalBlowup { column: usize },

    #[error("code {code} overflows {bits}-bit packing")]
    CodeOverflow { code: u8, bits: u8 },

    #[error("corrupted plane lengths: {0}")]
    CorruptPlanes(String),

    #[error("unsupported bits: {0}")]
    UnsupportedBits(u8),

    #[error("cannot slice upward: {from} -> {to} bits")]
    SliceUpward { from: u8, to: u8 },

    #[error("incomplete config: missing layer {0}")]
    IncompleteConfig(String),

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("mutation impossible: {0}")]
    MutationImpossible(String),

    #[error("infeasible budget: {0}")]
    InfeasibleBudget(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
