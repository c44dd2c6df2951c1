use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimMismatch { what: &'static str, expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("invalid sequence: {0}")]
    Sequence(String),
    #[error("zero-length turn ending at token index {0}")]
    ZeroLengthTurn(usize),
    #[error("unknown token id {0}")]
    UnknownToken(u32),
    #[error("sequence of {len} tokens exceeds context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("cache holds {cached} finalized chunks, cannot process chunk {requested}")]
    CacheOrder { cached: usize, requested: usize },
    #[error("all logits are -inf")]
    DegenerateLogits,
    #[error("tensor container: {0}")]
    Format(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
