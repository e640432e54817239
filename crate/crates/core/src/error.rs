use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("degenerate vector (zero norm) in {0}")]
    DegenerateVector(&'static str),

    #[error("sequence of length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite loss at step {step} (batch seed {batch_seed:#x}): {detail}")]
    NonFinite {
        step: u64,
        batch_seed: u64,
        detail: String,
    },

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("incompatible inputs: {0}")]
    Compatibility(String),

    #[error("corrupt header in {path}: {message}")]
    CorruptHeader { path: PathBuf, message: String },

    #[error("unsupported format version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated file {path}: {message}")]
    Truncated { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
