use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    MalformedText {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}: byte offset {offset}: {msg}")]
    MalformedBinary {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("unknown point format `{0}` (expected `text` or `binary`)")]
    UnknownFormat(String),

    #[error("non-finite coordinate in point {index}")]
    NonFinite { index: usize },

    #[error("empty point cloud")]
    EmptyCloud,

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: [usize; 3],
        actual: [usize; 3],
    },

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid shape {0:?}: every component must be >= 1")]
    InvalidShape([usize; 3]),

    #[error("kernel {kernel:?} is larger than grid {grid:?}")]
    KernelTooLarge { kernel: [usize; 3], grid: [usize; 3] },

    #[error("translation offset {offset:?} out of range for grid {shape:?}")]
    OffsetOutOfRange { offset: [i64; 3], shape: [usize; 3] },

    #[error("no interior region left for grid {grid:?} with margin {margin:?}")]
    NoInteriorRegion { grid: [usize; 3], margin: [usize; 3] },

    #[error("degenerate {kind} kernel: constant weights vanish after mean subtraction")]
    DegenerateKernel { kind: &'static str },

    #[error("parameter `{name}` out of range: {value} ({reason})")]
    ParamOutOfRange {
        name: String,
        value: f64,
        reason: &'static str,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value: {0}")]
    Numerical(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn out_of_range(name: impl Into<String>, value: f64, reason: &'static str) -> Self {
        Error::ParamOutOfRange {
            name: name.into(),
            value,
            reason,
        }
    }
}
