use thiserror::Error;

pub type Result<T, E = LaitError> = std::result::Result<T, E>;

/// Failures while decoding the binary weight and cache-entry formats.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: Vec<u8> },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
}

#[derive(Debug, Error)]
pub enum LaitError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("row {row} has no allowed attention entries")]
    FullyMasked { row: usize },
    #[error("index range error: {0}")]
    Range(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing template field `{0}`")]
    MissingField(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("unknown label `{label}` for task `{task}`")]
    UnknownLabel { task: String, label: String },
    #[error("cannot tokenize empty text")]
    EmptyText,
    #[error("segment {0} is empty")]
    EmptySegment(usize),
    #[error("nothing cacheable: layer-0 representations depend on the full input")]
    NothingCacheable,
    #[error("cache entry of {bytes} bytes exceeds the budget of {budget} bytes")]
    EntryTooLarge { bytes: usize, budget: usize },
    #[error("segment digests missing for record {0}")]
    MissingDigests(usize),
    #[error("invalid synthetic task: {0}")]
    InvalidTask(String),
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("line {line}: {message}")]
    Input { line: usize, message: String },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LaitError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LaitError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
