use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is below the zero-vector threshold")]
    ZeroVector { norm: f64 },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("modality signature must name at least one modality")]
    EmptySignature,

    #[error("unknown modality {0:?}")]
    UnknownModality(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask row {row} does not keep its positive column {column}")]
    MaskDropsPositive { row: usize, column: usize },

    #[error("batch has no samples")]
    EmptyBatch,

    #[error("hard-negative lists have different lengths ({min} vs {max}) and padding is disabled")]
    RaggedHardNegatives { min: usize, max: usize },

    #[error("row {row} has no hard negatives or in-batch negatives to pad from")]
    NothingToPad { row: usize },

    #[error("bidirectional loss requires a pure in-batch batch: {0}")]
    RequiresInBatchOnly(String),

    #[error("no projection for signature {0} and no member projections to fall back on")]
    UnknownSignature(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("query {0} has no ground-truth item in the pool")]
    MissingGroundTruth(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("composition {label} allocates {allocated} samples but the budget is {budget}")]
    BudgetMismatch {
        label: String,
        allocated: usize,
        budget: usize,
    },

    #[error("bad magic: expected \"UEMB\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported store version {0} (expected 1)")]
    VersionMismatch(u32),

    #[error("unsupported dtype code {0} (expected 0 = f32 LE or 1 = f64 LE)")]
    UnsupportedDtype(u8),

    #[error("truncated {field}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        field: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("{0} trailing bytes after payload")]
    TrailingBytes(u64),

    #[error("sidecar line {line}: row {row} out of range for a store of {count} rows")]
    SidecarRowOutOfRange { line: usize, row: u64, count: u64 },

    #[error("sidecar line {line}: {message}")]
    Sidecar { line: usize, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
