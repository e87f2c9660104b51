use crate::training::TrainTrace;

/// Errors produced across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("enumeration cap exceeded: {needed} sequences per prompt, cap is {cap}")]
    CapExceeded { needed: u128, cap: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("index out of range: {what} = {index}, bound {bound}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("reference assigns zero mass to (prompt {x}, completion {y})")]
    UnsupportedPoint { x: usize, y: usize },

    #[error("at least one negative sample is required")]
    EmptyNegatives,

    #[error("standard error is zero while estimates disagree (degenerate RNG?)")]
    InsufficientTrials,

    #[error("not enough candidates: need {needed}, have {available}")]
    NotEnoughCandidates { needed: usize, available: usize },

    #[error("unknown loss '{0}'")]
    UnknownLoss(String),

    #[error("missing hyperparameter '{param}' for loss '{loss}'")]
    MissingHyperparameter { loss: String, param: &'static str },

    #[error("insufficient support: need {needed} distinct completions, environment has {available}")]
    InsufficientSupport { needed: usize, available: usize },

    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("training diverged at step {step}: {reason}")]
    DivergenceDetected {
        step: usize,
        reason: String,
        trace: Box<TrainTrace>,
    },

    #[error("match result has no games")]
    EmptyMatch,

    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_index(what: &'static str, index: usize, bound: usize) -> Result<()> {
    if index < bound {
        Ok(())
    } else {
        Err(Error::IndexOutOfRange { what, index, bound })
    }
}
