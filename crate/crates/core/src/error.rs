use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported version {found} at offset {offset} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32, offset: u64 },

    #[error("truncated payload: needed {needed} bytes at offset {offset}, file has {available}")]
    Truncated { offset: u64, needed: u64, available: u64 },

    #[error("trailing bytes: expected end of file at offset {offset}, file has {len}")]
    TrailingBytes { offset: u64, len: u64 },

    #[error("crc mismatch at offset {offset}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { offset: u64, stored: u32, computed: u32 },

    #[error("dimension inconsistency: {0}")]
    DimMismatch(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("id {0:?} exceeds 256 bytes")]
    IdTooLong(String),

    #[error("non-finite value at (sample {sample}, patch {patch}, dim {dim})")]
    NonFinite { sample: usize, patch: usize, dim: usize },

    #[error("non-finite value in row {0}")]
    NonFiniteRow(usize),

    #[error("need at least 2 vectors, got {0}")]
    TooFewVectors(usize),

    #[error("k = {k} out of range [1, {max}]")]
    KOutOfRange { k: usize, max: usize },

    #[error("row {row} out of range for {n} rows")]
    RowOutOfRange { row: usize, n: usize },

    #[error("missing label for id {0:?}")]
    MissingLabel(String),

    #[error("unknown sample id {0:?}")]
    UnknownId(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("svd did not converge within {sweeps} sweeps (off-diagonal mass {residual:e})")]
    SvdNoConvergence { sweeps: usize, residual: f64 },

    #[error("target_dim {target} too large (max {max})")]
    TargetDimTooLarge { target: usize, max: usize },

    #[error("constant input: rank variance is zero")]
    ConstantInput,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("insufficient id overlap: {overlap} shared ids (need at least {needed})")]
    InsufficientOverlap { overlap: usize, needed: usize },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("image error: {0}")]
    Image(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
