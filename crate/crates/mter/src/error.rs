use std::path::PathBuf;

use mter_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MterError {
    #[error("{path}: expected IDX magic {expected:#010x}, found {found:#010x}")]
    WrongMagic { path: String, expected: u32, found: u32 },
    #[error("{path}: truncated IDX file (header promises {expected} bytes, found {actual})")]
    TruncatedFile { path: String, expected: usize, actual: usize },
    #[error("{path}: {extra} unexpected bytes after the IDX payload")]
    TrailingBytes { path: String, extra: usize },
    #[error("{path}: images are {rows}x{cols}, expected 28x28")]
    WrongImageSize { path: String, rows: usize, cols: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("train and probe classes overlap: {0:?}")]
    OverlappingClasses(Vec<usize>),
    #[error("split has no samples: {0}")]
    EmptySplit(String),
    #[error("need at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("no samples for class {0}")]
    EmptyQueue(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid attack: {0}")]
    InvalidAttack(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid protocol arguments: {0}")]
    ProtocolArg(String),
    #[error("model embedding dimension is {0}, expected 2")]
    WrongEmbedDim(usize),
    #[error("corrupt checkpoint: {0}")]
    CheckpointCorrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl MterError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MterError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, MterError>;
