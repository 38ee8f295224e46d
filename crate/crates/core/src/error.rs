use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DonnError>;

#[derive(Debug, Error)]
pub enum DonnError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index ({i}, {j}) out of bounds for {n}x{n} mask")]
    OutOfBounds { i: usize, j: usize, n: usize },

    #[error("detector sums contain NaN")]
    InvalidIntensity,

    #[error("class index {0} out of range")]
    InvalidClass(usize),

    #[error("tape was captured at model revision {captured}, model is now at {current}")]
    TapeInvalid { captured: u64, current: u64 },

    #[error("block size {block} does not divide grid size {n}")]
    Partition { n: usize, block: usize },

    #[error("sparsity ratio {0} outside [0, 1]")]
    InvalidRatio(f64),

    #[error("bank size {bank} does not divide row length {n}")]
    BankSize { n: usize, bank: usize },

    #[error("exhaustive search limited to n <= {max}, got n = {n}")]
    SizeGuard { n: usize, max: usize },

    #[error("input image has zero power")]
    ZeroPower,

    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file ({detail})")]
    Truncated { path: PathBuf, detail: String },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    CheckpointShape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Broad failure class, used by the CLI to choose an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Divergence,
    Other,
}

impl DonnError {
    pub fn class(&self) -> ErrorClass {
        use DonnError::*;
        match self {
            Config(_) | InvalidGeometry(_) | InvalidRatio(_) | Partition { .. } | BankSize { .. } => {
                ErrorClass::Config
            }
            BadMagic { .. }
            | Truncated { .. }
            | CountMismatch { .. }
            | CorruptCheckpoint(_)
            | VersionMismatch { .. }
            | CheckpointShape(_)
            | ZeroPower
            | Io(_) => ErrorClass::Data,
            Divergence(_) | InvalidIntensity => ErrorClass::Divergence,
            _ => ErrorClass::Other,
        }
    }
}
