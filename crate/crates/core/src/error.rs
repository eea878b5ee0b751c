use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("state of length {len} exceeds the context limit {limit}")]
    ContextOverflow { len: usize, limit: usize },
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("state has no predecessor")]
    NoPredecessor,
    #[error("no replay entries for this prefix")]
    UnknownPrefix,
    #[error("enumeration would visit {count} states, above the bound {bound}")]
    EnumerationBound { count: u128, bound: u128 },
    #[error("prefix length {prefix} exceeds sequence length {len}")]
    PrefixTooLong { prefix: usize, len: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
