use thiserror::Error;

use crate::select::CoresetState;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("singular system: {0}")]
    Singular(String),

    #[error("conjugate gradients produced a non-finite iterate after {iterations} iterations; the operator is likely indefinite, retry with damping")]
    Indefinite { iterations: usize },

    #[error("Neumann series diverged after {terms} terms; choose a smaller scaling alpha")]
    NeumannDiverged { terms: usize },

    #[error("mixture component {component} collapsed after {reinits} reinitializations")]
    ComponentCollapse { component: usize, reinits: usize },

    #[error("sparsity penalty reached {beta:e} with support {support} still above target {target}")]
    PenaltyOverflow {
        beta: f64,
        support: usize,
        target: usize,
    },

    #[error("selection aborted after {} selected points: {source}", partial.selected.len())]
    Selection {
        partial: Box<CoresetState>,
        source: Box<Error>,
    },

    #[error("summarizer failed: {0}")]
    Summarizer(Box<Error>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidInput(msg.into()))
}
