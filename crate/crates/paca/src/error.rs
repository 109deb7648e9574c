use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Core(#[from] paca_core::Error),

    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint was written for config {found:#018x}, expected {expected:#018x}")]
    ConfigMismatch { expected: u64, found: u64 },
    #[error("checkpoint holds {found} tensors, model has {expected}")]
    TensorCount { expected: usize, found: usize },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint tensor {index} is `{found}`, expected `{expected}`")]
    NameMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("tensor `{name}` has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),

    #[error("netpbm: {0}")]
    Netpbm(String),

    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{path}: truncated record at byte {offset}")]
    TruncatedRecord { path: PathBuf, offset: usize },
    #[error("{path}: record {record} has label {label}, expected < {classes}")]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: usize,
        classes: usize,
    },
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> IoError {
    let path = path.into();
    move |source| IoError::Io { path, source }
}
