use thiserror::Error;

/// Errors shared across the tensor core, tree model, cells and training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value rejected: {0}")]
    NonFinite(String),

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("empty children: {0}")]
    EmptyChildren(String),

    #[error("degenerate neighborhood: row {row} of the mask has no unmasked entry")]
    DegenerateNeighborhood { row: usize },

    #[error("cycle: {0}")]
    Cycle(String),

    #[error("unknown node {0}")]
    UnknownNode(usize),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("registry error: {0}")]
    Registry(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("depth limit exceeded: level {level} > max depth {max}")]
    DepthLimit { level: usize, max: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("decode state error: {0}")]
    DecodeState(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
