use std::path::PathBuf;

use crate::volume::Dims;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: Dims, right: Dims },

    #[error("invalid dimensions {0}: {1}")]
    BadDims(Dims, &'static str),

    #[error("inverted range for {name}: [{lo}, {hi}]")]
    InvertedRange { name: String, lo: f64, hi: f64 },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParam { name: String, reason: String },

    #[error("label {0} present in map but missing from ordering/parameters")]
    MissingLabel(u16),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("bias field must be strictly positive (found {0})")]
    NonPositiveBias(f32),

    #[error("atlas has {atlas} channels but {expected} were expected")]
    ChannelMismatch { atlas: usize, expected: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error("unknown config key `{0}`")]
    ConfigUnknownKey(String),

    #[error("nifti: bad header size {0} (expected 348)")]
    NiftiHeaderSize(i32),

    #[error("nifti: bad magic {0:?}")]
    NiftiMagic([u8; 4]),

    #[error("nifti: unsupported datatype code {0}")]
    NiftiDatatype(i16),

    #[error("nifti: expected {expected} dimensions, found dim[0] = {found}")]
    NiftiDimCount { expected: i16, found: i16 },

    #[error("nifti: truncated payload ({got} of {need} bytes)")]
    NiftiTruncated { got: usize, need: usize },

    #[error("nifti: {0}")]
    NiftiFormat(String),

    #[error("stream: bad magic {0:?}")]
    StreamMagic([u8; 4]),

    #[error("stream: declared length overflows limits ({0})")]
    StreamLength(String),

    #[error("stream: truncated record ({got} of {need} bytes)")]
    StreamTruncated { got: usize, need: usize },

    #[error("stream: bad parameter record: {0}")]
    StreamRecord(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParam {
            name: name.into(),
            reason: reason.into(),
        }
    }
}
