use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {stage}{}", .layer.map(|l| format!(" at layer {l}")).unwrap_or_default())]
    NonFinite { stage: String, layer: Option<usize> },

    #[error("forward cache is missing state required by the backward pass: {0}")]
    MissingCache(&'static str),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: String, expected: u32 },

    #[error("checkpoint blob truncated: manifest declares {expected} bytes, file holds {actual} bytes after offset {blob_start}")]
    TruncatedBlob {
        expected: u64,
        actual: u64,
        blob_start: u64,
    },

    #[error("tensor `{name}` spans bytes {offset}..{end} but the blob holds {blob_len} bytes")]
    OffsetOverrun {
        name: String,
        offset: u64,
        end: u64,
        blob_len: u64,
    },

    #[error("checkpoint blob checksum {found:08x} does not match the manifest ({expected:08x})")]
    ChecksumMismatch { expected: u32, found: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    /// Process exit code for the failure category.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Shape(_) | Error::InvalidArgument(_) => 3,
            Error::NonFinite { .. } | Error::MissingCache(_) => 4,
            Error::VersionMismatch { .. }
            | Error::TruncatedBlob { .. }
            | Error::OffsetOverrun { .. }
            | Error::ChecksumMismatch { .. }
            | Error::Malformed(_) => 5,
            Error::Io(_) => 6,
        }
    }
}
