use thiserror::Error;

/// Errors produced anywhere in the encoder stack, from tensor shape checks
/// through checkpoint I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index out of range in {op}: {index} (valid range {range})")]
    Index {
        op: &'static str,
        index: usize,
        range: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("integrity check failed for {block}: {detail}")]
    Integrity { block: String, detail: String },

    #[error("malformed checkpoint: {0}")]
    Format(String),

    #[error("non-finite loss at step {step} (utterances {utterances:?})")]
    NonFiniteLoss {
        step: usize,
        utterances: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
