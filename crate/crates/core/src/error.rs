use alloc::string::String;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("could not place object {index} after {attempts} attempts; config is too dense")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("caption of {len} tokens exceeds text capacity {max}")]
    CaptionOverflow { len: usize, max: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("all target positions are padding")]
    AllPadded,
    #[error("loss diverged at step {step}")]
    Diverged { step: usize },
    #[error("missing loss component {0}")]
    MissingComponent(&'static str),
    #[error("unexpected loss component {0} for this stage")]
    UnexpectedComponent(&'static str),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
