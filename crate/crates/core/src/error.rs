use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },

    #[error("{what} of {value} is not divisible by {factor}")]
    NotDivisible {
        what: &'static str,
        value: usize,
        factor: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported spherical-harmonic basis size {0} (expected 1, 4 or 9)")]
    UnsupportedBasis(usize),

    #[error("grid has {actual} channel(s), operation requires {expected}")]
    ChannelMismatch { expected: usize, actual: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("frame {frame}: {message}")]
    InvalidPose { frame: String, message: String },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("teacher has no entry for view {0}")]
    MissingView(String),

    #[error("view ids differ: {0}")]
    ViewMismatch(String),

    #[error("malformed {kind} file at byte offset {offset}: {message}")]
    Malformed {
        kind: &'static str,
        offset: u64,
        message: String,
    },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("no valid pixels under the mask")]
    EmptyMask,

    #[error("sequence of {len} frames is too short for offset {delta}")]
    SequenceTooShort { len: usize, delta: usize },

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
