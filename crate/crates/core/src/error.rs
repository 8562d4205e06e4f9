use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are grouped by the kind of failure so callers (the CLI in
/// particular) can map them onto exit codes without string matching.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{source_name}:{line}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        message: String,
    },

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("corrupt file: {0}")]
    Corruption(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure class, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Io,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape(_) | Error::Usage(_) | Error::Config(_) => ErrorClass::Usage,
            Error::Parse { .. }
            | Error::Lookup(_)
            | Error::Dataset(_)
            | Error::Corruption(_)
            | Error::Version { .. } => ErrorClass::Data,
            Error::Io { .. } => ErrorClass::Io,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(what: &str, a: (usize, usize), b: (usize, usize)) -> Self {
        Error::Shape(format!(
            "{what}: {}x{} vs {}x{}",
            a.0, a.1, b.0, b.1
        ))
    }
}

/// The contextual dimension must equal the label-embedding dimension, since
/// cosine similarity is taken between contextual rows and prototype columns.
pub(crate) fn dim_constraint(m_c: usize, m_l: usize) -> Error {
    Error::Config(format!(
        "contextual embedding dim m_c={m_c} must equal label embedding dim m_l={m_l} \
         (cosine similarity requires m_c == m_l)"
    ))
}

pub type Result<T> = std::result::Result<T, Error>;
