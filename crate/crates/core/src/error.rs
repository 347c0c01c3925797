use thiserror::Error;

use crate::llm::BackendError;
use crate::okr::{AgentId, StructureError};
use crate::prompt::{FormatError, RenderError};
use crate::trace::TraceError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Structure(#[from] StructureError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    /// Every attempt at a constrained reply failed to parse.
    #[error("`{tag}` gave no parseable reply in {} attempts: {last_error}", attempts.len())]
    FormatExhausted {
        tag: String,
        /// Raw reply of every attempt, in order.
        attempts: Vec<String>,
        last_error: FormatError,
    },
    #[error("agent {agent} wrote outside its subtree: {}", keys.join(", "))]
    LocalityViolation { agent: AgentId, keys: Vec<String> },
    #[error("invalid input: {0}")]
    Validation(String),
}

impl Error {
    /// Short stable name for reports and exit messages.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Structure(_) => "structure",
            Error::Render(_) => "render",
            Error::Backend(BackendError::Transport(_)) => "transport",
            Error::Backend(BackendError::Api { .. }) => "api",
            Error::Backend(BackendError::ScriptMiss { .. }) => "script_miss",
            Error::Backend(BackendError::ReplayDivergence { .. }) => "replay_divergence",
            Error::Backend(BackendError::ReplayExhausted { .. }) => "replay_exhausted",
            Error::Backend(_) => "backend",
            Error::Trace(_) => "trace",
            Error::FormatExhausted { .. } => "format_exhausted",
            Error::LocalityViolation { .. } => "locality_violation",
            Error::Validation(_) => "validation",
        }
    }
}
