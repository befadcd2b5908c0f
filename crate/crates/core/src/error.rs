use std::path::PathBuf;

use crate::outcome_space::PromptId;

/// Errors produced by the distillation library.
#[derive(Debug, thiserror::Error)]
pub enum BondError {
    #[error("outcome space of {count} sequences exceeds the enumeration cap of {cap}")]
    EnumerationTooLarge { count: u128, cap: usize },
    #[error("brute-force enumeration of {tuples} tuples exceeds the cap of {cap}")]
    TupleCapExceeded { tuples: u128, cap: u128 },
    #[error("unknown prompt {0}")]
    UnknownPrompt(PromptId),
    #[error("outcome index {index} is outside a space of {len} outcomes")]
    OutcomeOutOfRange { index: usize, len: usize },
    #[error("token sequence {tokens:?} does not belong to a vocabulary of {size} tokens and length {max_len}")]
    InvalidTokens {
        tokens: Vec<usize>,
        size: usize,
        max_len: usize,
    },
    #[error("strict ordering requires two distinct outcomes (got index {0} twice)")]
    SameOutcome(usize),
    #[error("distribution is not normalized (sum = {sum})")]
    Unnormalized { sum: f64 },
    #[error("Best-of-N requires n >= {min} (got {n})")]
    InvalidN { n: usize, min: usize },
    #[error("divergence is infinite: q has no mass at an outcome p supports (index {index})")]
    InfiniteDivergence { index: usize },
    #[error("shape mismatch: expected {expected} entries, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("at least one sample is required")]
    EmptySamples,
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("invalid configuration; offending keys: {}", keys.join(", "))]
    InvalidConfig { keys: Vec<String> },
    #[error("unknown scenario generator `{0}`")]
    UnknownScenario(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("missing required column `{column}` in {path}")]
    MissingColumn { path: String, column: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = BondError> = std::result::Result<T, E>;

impl BondError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BondError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        BondError::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
