use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: operand `{operand}` has shape {actual}, expected {expected}")]
    ShapeMismatch {
        op: &'static str,
        operand: &'static str,
        expected: String,
        actual: Shape,
    },

    #[error("buffer of length {len} does not fit shape {shape} ({expected} elements)")]
    BufferLength {
        len: usize,
        shape: Shape,
        expected: usize,
    },

    #[error("{what} contains a non-finite value at flat index {index}")]
    NonFinite { what: String, index: usize },

    #[error("backward called without a recorded graph")]
    NoGraph,

    #[error("loss must have shape 1x1x1x1, got {0}")]
    NotScalar(Shape),

    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),

    #[error("parameter `{0}` is not in the store")]
    MissingParameter(String),

    #[error("input extents {height}x{width} are not divisible by {multiple}; pad the frame first")]
    IndivisibleExtent {
        height: usize,
        width: usize,
        multiple: usize,
    },

    #[error("flow for pyramid level {0} is missing")]
    MissingLevel(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {message}")]
    Format { path: String, message: String },

    #[error("{path}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum {
        path: String,
        stored: u64,
        computed: u64,
    },

    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch} (pairs {pairs:?})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        pairs: Vec<usize>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        operand: &'static str,
        expected: impl Into<String>,
        actual: Shape,
    ) -> Self {
        Error::ShapeMismatch {
            op,
            operand,
            expected: expected.into(),
            actual,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
