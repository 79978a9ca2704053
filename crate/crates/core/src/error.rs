//! Error type shared across the engine.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed interaction record: {reason}")]
    ParseLine {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: no interaction records found")]
    EmptyDataset { path: PathBuf },

    #[error("split ratios must be positive and sum to 1, got {0:?}")]
    BadSplitRatios((f64, f64, f64)),

    #[error("cold-start ratio must satisfy 0 <= ratio < 1, got {0}")]
    BadColdRatio(f64),

    #[error("{path}: bad magic bytes, expected \"MMGF\"")]
    FeatureMagic { path: PathBuf },

    #[error("{path}: unsupported format version {version}")]
    FeatureVersion { path: PathBuf, version: u32 },

    #[error("{path}: unknown modality tag {tag}")]
    FeatureModality { path: PathBuf, tag: u8 },

    #[error("{path}: feature matrix has {found} rows, expected {expected}")]
    FeatureDims {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: non-finite value at row {row}, col {col}")]
    FeatureNonFinite {
        path: PathBuf,
        row: usize,
        col: usize,
    },

    #[error("{path}: file truncated, expected {expected} bytes of payload")]
    FeatureTruncated { path: PathBuf, expected: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("k must satisfy 1 <= k <= n-1, got k={k} for n={n}")]
    BadNeighborCount { k: usize, n: usize },

    #[error("user {user} has no valid negative item to sample")]
    NoNegativeAvailable { user: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("graph dump parse error at line {line}: {reason}")]
    GraphDump { line: usize, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
