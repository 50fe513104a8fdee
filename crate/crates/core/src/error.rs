use std::path::PathBuf;

use thiserror::Error;

use crate::graph::NodeId;

/// Errors raised anywhere in the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("shape mismatch at node {node}: {message}")]
    NodeShape { node: NodeId, message: String },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("graph contains a cycle through nodes {0:?}")]
    CyclicGraph(Vec<NodeId>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("confusion matrix is empty")]
    EmptyConfusion,
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: header implies {expected} bytes, found {actual}")]
    TruncatedFile { expected: u64, actual: u64 },
    #[error("unsupported format version {0}")]
    VersionUnsupported(u16),
    #[error("config error: {0}")]
    Config(String),
    #[error("batch {batch}: {source}")]
    Batch {
        batch: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Strips `Batch` context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Batch { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
