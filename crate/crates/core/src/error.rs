use thiserror::Error;

use crate::tensor::Shape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("buffer length {len} does not match shape {shape} ({expected} elements)")]
    BufferLength {
        len: usize,
        shape: Shape,
        expected: usize,
    },

    #[error("invalid convolution: {0}")]
    InvalidConv(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown tensor id {0}")]
    UnknownTensor(usize),

    #[error("backward seed must be a scalar (1, 1, 1, 1), got {0}")]
    NonScalarSeed(Shape),

    #[error("missing parameter `{0}`")]
    MissingParameter(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("at `{path}`: {source}")]
    AtNode {
        path: String,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown preset `{0}` (expected one of a1, a2, a3, b, c)")]
    UnknownPreset(String),

    #[error("spatial ladder underflow at `{path}`: {message}")]
    LadderUnderflow { path: String, message: String },

    #[error("non-finite loss at step {step}")]
    Divergence { step: usize },

    #[error("unsupported dtype: {0}")]
    UnsupportedDtype(String),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Attaches a node path to an error raised while processing that node.
    pub fn at(self, path: impl Into<String>) -> Self {
        match self {
            // the innermost path is the most specific one
            e @ (Error::AtNode { .. } | Error::LadderUnderflow { .. }) => e,
            e => Error::AtNode {
                path: path.into(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, with node context removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtNode { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
