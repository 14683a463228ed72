use crate::policy::StateId;
use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("state {0} is not present in the policy table")]
    MissingState(StateId),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("non-finite gradient entry for state {state} at token {token}")]
    NonFiniteGradient { state: StateId, token: usize },

    #[error("non-finite importance ratio for record {index} (state {state}, token {token})")]
    NonFiniteRatio { index: usize, state: StateId, token: usize },

    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("enumeration of {count} sequences exceeds the bound of {bound}")]
    EnumerationBound { count: u128, bound: u128 },

    #[error("trajectory has {len} tokens but the horizon is {horizon}")]
    Incomplete { len: usize, horizon: usize },

    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("step {step}, epoch {epoch}: {source}")]
    AtStep {
        step: usize,
        epoch: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        reason: reason.into(),
    }
}
