//! Error type shared by every module of the crate.

use thiserror::Error;

use crate::kronecker::{DecompositionReport, KroneckerPair};

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible shapes.
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    /// A vector or buffer has the wrong length.
    #[error("{op}: expected length {expected}, got {got}")]
    Length {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("token id {id} is out of range for a vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    /// No Kronecker split of the requested shape exists.
    #[error("cannot plan Kronecker factors for {rows}x{cols} at target factor {target}: {reason}")]
    Plan {
        rows: usize,
        cols: usize,
        target: f64,
        reason: String,
    },

    /// Power iteration hit its iteration cap. The last iterate is kept so the
    /// caller can decide whether it is good enough.
    #[error("power iteration did not converge within {iterations} iterations")]
    NotConverged {
        iterations: usize,
        partial: Box<(KroneckerPair, DecompositionReport)>,
    },

    /// An error raised while processing a named tensor.
    #[error("in tensor {tensor}")]
    Tensor {
        tensor: String,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss {
        component: &'static str,
        step: usize,
    },

    /// The loss node handed to `backward` is not a 1x1 scalar.
    #[error("backward needs a scalar loss, got a {rows}x{cols} node")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Archive(#[from] crate::io::archive::ArchiveError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Attach a tensor name to an error.
    pub fn in_tensor(self, name: impl Into<String>) -> Self {
        Error::Tensor {
            tensor: name.into(),
            source: Box::new(self),
        }
    }
}
