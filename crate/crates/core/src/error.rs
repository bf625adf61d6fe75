//! Shared error type for the whole crate.

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left {left_rows}x{left_cols} vs right {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("{what}: length mismatch, {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence length {len} exceeds max positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("attention row {row} has no permitted key positions")]
    FullyMaskedRow { row: usize },
    #[error("decoder input must start with the begin-of-sequence token")]
    MissingBos,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("corpus line {line}: {reason}")]
    BadCorpusLine { line: usize, reason: String },
    #[error("corpus line {line}: sentence has {tokens} tokens, exceeding the batch token budget {budget}")]
    SentenceOverBudget {
        line: usize,
        tokens: usize,
        budget: usize,
    },
    #[error("non-finite {what} at step {step}{}", match .last_checkpoint { Some(p) => format!("; last good checkpoint: {p}"), None => String::new() })]
    NonFinite {
        what: &'static str,
        step: u64,
        last_checkpoint: Option<String>,
    },
    #[error("gradient check: non-finite {which} for parameter {name}")]
    GradCheckNonFinite { name: String, which: &'static str },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("metrics log: {0}")]
    Metrics(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
