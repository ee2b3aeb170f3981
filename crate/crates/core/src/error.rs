//! Error type shared by the core modules.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes incompatible for an op; carries both shapes.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// An op that requires finite inputs saw a NaN or infinity.
    NonFinite { op: &'static str },
    /// `backward` called on a root that is not a scalar.
    NonScalarRoot { shape: Vec<usize> },
    /// A configuration invariant was violated.
    InvalidConfig(String),
    /// Token id at or above the vocabulary size.
    TokenOutOfRange { id: u32, vocab: usize },
    /// Sequence longer than the model's maximum.
    SequenceTooLong { len: usize, max: usize },
    /// An operation that needs data got none.
    EmptyCorpus,
    /// Retrieval asked for more neighbours than the store holds.
    KTooLarge { k: usize, store: usize },
    /// A numeric parameter is outside its legal range.
    InvalidParameter { what: &'static str, value: f64 },
    /// An evaluation child name is not a single token of the vocabulary.
    ChildNotInVocab(String),
    /// A name pool cannot supply another distinct name.
    NamePoolExhausted(&'static str),
    /// v2 generation requires a non-empty descriptor pool.
    EmptyDescriptorPool,
    /// Training loss became NaN; the step of the last good checkpoint is carried.
    Diverged { step: usize },
    /// Projection hit a non-finite objective.
    ProjectionAborted(String),
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            CoreError::NonFinite { op } => write!(f, "{op}: non-finite input"),
            CoreError::NonScalarRoot { shape } => {
                write!(f, "backward requires a scalar root, got shape {shape:?}")
            }
            CoreError::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            CoreError::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab}")
            }
            CoreError::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds maximum {max}")
            }
            CoreError::EmptyCorpus => write!(f, "corpus is empty"),
            CoreError::KTooLarge { k, store } => {
                write!(f, "k = {k} exceeds datastore size {store}")
            }
            CoreError::InvalidParameter { what, value } => {
                write!(f, "{what} = {value} is outside its legal range")
            }
            CoreError::ChildNotInVocab(name) => {
                write!(f, "child name {name:?} is not a single vocabulary token")
            }
            CoreError::NamePoolExhausted(which) => {
                write!(f, "{which} name pool exhausted")
            }
            CoreError::EmptyDescriptorPool => write!(f, "descriptor pool is empty"),
            CoreError::Diverged { step } => {
                write!(f, "training loss became NaN at step {step}")
            }
            CoreError::ProjectionAborted(msg) => write!(f, "projection aborted: {msg}"),
        }
    }
}

impl core::error::Error for CoreError {}

pub type Result<T> = core::result::Result<T, CoreError>;
