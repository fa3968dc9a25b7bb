//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the simulator library.
#[derive(Debug, Error)]
pub enum Error {
    /// An input had the wrong shape for the operation.
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    /// Two vectors belong to different model specs and cannot be combined.
    #[error("spec fingerprint mismatch: {expected} vs {actual}")]
    FingerprintMismatch { expected: String, actual: String },

    /// Training produced a non-finite value.
    #[error("non-finite value encountered at layer {layer}")]
    NonFinite { layer: usize },

    /// A scalar argument was outside its valid range.
    #[error("invalid argument {name}: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// The byzantine bound 2f + 2 < n does not hold.
    #[error("multi-krum bound violated: 2f + 2 < n required, got f = {f}, n = {n}")]
    ByzantineBound { f: usize, n: usize },

    /// Every effective aggregation weight was zero; the merge is aborted.
    #[error("merge aborted: all effective weights are zero")]
    MergeAborted,

    /// A block failed the endorsement check.
    #[error("endorsement rejected: {0}")]
    Endorsement(String),

    /// A channel id is already taken.
    #[error("channel {0:?} already exists")]
    DuplicateChannel(String),

    /// No channel with this id.
    #[error("unknown channel {0:?}")]
    UnknownChannel(String),

    /// An identity id is not in the membership registry.
    #[error("unknown identity {0}")]
    UnknownIdentity(String),

    /// A persisted ledger or dataset file is malformed.
    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: String, reason: String },

    /// Configuration failed validation; every violated constraint is listed.
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    InvalidConfig(Vec<String>),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
