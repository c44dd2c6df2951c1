use serde::{Deserialize, Serialize};

/// One LLM exchange that failed to parse.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub response: String,
    pub error: String,
}

#[derive(Debug, thiserror::Error)]
pub enum ScriptError {
    #[error("source not found: {0}")]
    NotFound(String),
    #[error("cannot fetch {url}: {detail}")]
    Unreachable { url: String, detail: String },
    #[error("document is empty: {0}")]
    EmptyDocument(String),
    #[error("LLM transport failure: {0}")]
    Transport(String),
    #[error("{stage} response unparseable after {} attempts: {}", attempts.len(), attempts.last().map_or("", |a| a.error.as_str()))]
    Unparseable { stage: &'static str, attempts: Vec<Attempt> },
    #[error("template error: {0}")]
    Template(String),
    #[error("unknown speaker label {0:?}")]
    UnknownSpeaker(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] duocast_core::Error),
}

pub type Result<T> = std::result::Result<T, ScriptError>;
