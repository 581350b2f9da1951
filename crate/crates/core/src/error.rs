use std::path::PathBuf;

use cmtc_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CmtcError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line} (byte {offset}): {msg}")]
    Parse {
        line: usize,
        offset: usize,
        msg: String,
    },
    #[error("record {index} ({record}) lies outside the {width}x{height} sensor")]
    OutOfRange {
        index: usize,
        record: String,
        width: u16,
        height: u16,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Shape(String),
    #[error(
        "stream spans {span_us} us but {clip_len} windows of {t_window} us need at least {needed_us} us; use a smaller t_window"
    )]
    StreamTooShort {
        span_us: u64,
        clip_len: usize,
        t_window: u64,
        needed_us: u64,
    },
    #[error("mask value {value} at index {index} is not binary")]
    NonBinaryMask { value: f64, index: usize },
    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },
    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = CmtcError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CmtcError {
    let path = path.into();
    move |source| CmtcError::Io { path, source }
}

pub(crate) fn config(msg: impl Into<String>) -> CmtcError {
    CmtcError::Config(msg.into())
}
