use std::path::PathBuf;

use thiserror::Error;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Usage,
    Data,
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{module}::{op}: shape mismatch: {detail}")]
    Shape {
        module: &'static str,
        op: &'static str,
        detail: String,
    },

    #[error("{module}::{op}: invalid argument: {detail}")]
    InvalidArgument {
        module: &'static str,
        op: &'static str,
        detail: String,
    },

    #[error("{module}::{op}: non-finite value: {detail}")]
    NonFinite {
        module: &'static str,
        op: &'static str,
        detail: String,
    },

    #[error("{module}::{op}: {}: {source}", path.display())]
    Io {
        module: &'static str,
        op: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("data::netpbm: {}: {source}", path.display())]
    Netpbm {
        path: PathBuf,
        #[source]
        source: NetpbmError,
    },

    #[error("checkpoint: {}: {source}", path.display())]
    Checkpoint {
        path: PathBuf,
        #[source]
        source: CheckpointError,
    },

    #[error("config: {}: {detail}", path.display())]
    Config { path: PathBuf, detail: String },

    #[error("{module}::{op}: {detail}")]
    Data {
        module: &'static str,
        op: &'static str,
        detail: String,
    },

    #[error("guard::{op}: {detail}")]
    State { op: &'static str, detail: String },
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config { .. } => Category::Usage,
            Error::Io { .. }
            | Error::Netpbm { .. }
            | Error::Checkpoint { .. }
            | Error::Data { .. } => Category::Data,
            Error::Shape { .. }
            | Error::InvalidArgument { .. }
            | Error::NonFinite { .. }
            | Error::State { .. } => Category::Runtime,
        }
    }

    pub(crate) fn shape(module: &'static str, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            module,
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(module: &'static str, op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            module,
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn data(module: &'static str, op: &'static str, detail: impl Into<String>) -> Self {
        Error::Data {
            module,
            op,
            detail: detail.into(),
        }
    }

    pub fn io(
        module: &'static str,
        op: &'static str,
        path: impl Into<PathBuf>,
        source: std::io::Error,
    ) -> Self {
        Error::Io {
            module,
            op,
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetpbmError {
    #[error("bad magic {0:?}, expected P5 or P6")]
    BadMagic(String),
    #[error("unsupported maxval {0}, only 255 is accepted")]
    BadMaxval(u32),
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("bad magic, expected ARMSNTL1")]
    BadMagic,
    #[error("truncated container at byte {0}")]
    Truncated(usize),
    #[error("tensor name is not valid UTF-8")]
    BadName,
    #[error("malformed container: {0}")]
    Malformed(String),
    #[error("tensor '{name}' has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor '{0}' missing from checkpoint")]
    Missing(String),
    #[error("unexpected tensor '{0}' in checkpoint")]
    Unexpected(String),
    #[error("duplicate tensor name '{0}'")]
    Duplicate(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
