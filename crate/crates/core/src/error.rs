use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NppError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NppError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("patch spec error: {0}")]
    PatchSpec(String),

    #[error("data format error: {0}")]
    Format(#[from] FormatError),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Parse failures for the NPPT token dataset container.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes {found:?}, expected \"NPPT\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported version {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated in header")]
    TruncatedHeader,

    #[error("file truncated in record {record}")]
    TruncatedRecord { record: u64 },

    #[error("record {record}: token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { record: u64, token: u32, vocab: u32 },

    #[error("record {record}: class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { record: u64, class: u32, num_classes: u32 },

    #[error("{extra} trailing bytes after last record")]
    TrailingBytes { extra: usize },
}

impl NppError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NppError::Io {
            path: path.into(),
            source,
        }
    }
}
