use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("gradient for unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("non-finite gradient for `{0}`; parameters left untouched")]
    NonFiniteGradient(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("token {0} out of vocabulary range")]
    Token(u32),

    #[error("{path}: line {line}: {msg}")]
    Jsonl { path: String, line: usize, msg: String },

    #[error("checkpoint corrupt: {0}")]
    Checkpoint(String),

    #[error("pair kind mismatch: header says {header}, found {found}")]
    KindMismatch { header: String, found: String },

    #[error("degenerate pair for item {0}: chosen equals rejected after retries")]
    DegeneratePair(usize),

    #[error("missing credential: set {0}")]
    MissingCredential(String),

    #[error("generator endpoint error after {attempts} attempts: {msg}")]
    Endpoint { attempts: u32, msg: String },

    #[error("metric sets differ: only in left {left:?}, only in right {right:?}")]
    MetricMismatch { left: Vec<String>, right: Vec<String> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
