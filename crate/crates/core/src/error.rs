use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    Shape {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("architecture syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("target {target} out of range for {n_classes} classes")]
    TargetOutOfRange { target: usize, n_classes: usize },

    #[error("bad magic: expected {:?}, found {:?}", String::from_utf8_lossy(expected), String::from_utf8_lossy(found))]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },

    #[error("label {label} >= {n_classes} classes in utterance {utterance:?} frame {frame}")]
    LabelOutOfRange {
        utterance: String,
        frame: usize,
        label: u32,
        n_classes: usize,
    },

    #[error("malformed data: {0}")]
    Malformed(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("gradient check failed for blocks: {}", .0.join(", "))]
    GradCheck(Vec<String>),

    #[error("worker {worker} failed: {message}")]
    Worker {
        worker: usize,
        message: String,
        kind: ErrorKind,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the command-line front end to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

impl Error {
    pub fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::Shape {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Syntax { .. } | Error::Architecture(_) | Error::Config(_) => ErrorKind::Usage,
            Error::NonFinite(_) | Error::Degenerate(_) | Error::Diverged(_) | Error::GradCheck(_) => ErrorKind::Numerical,
            Error::Worker { kind, .. } => *kind,
            Error::Shape { .. }
            | Error::TargetOutOfRange { .. }
            | Error::BadMagic { .. }
            | Error::UnsupportedVersion(_)
            | Error::Truncated { .. }
            | Error::LabelOutOfRange { .. }
            | Error::Malformed(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorKind::Data,
        }
    }
}
