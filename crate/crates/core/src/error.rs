use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    NumericalFailure(String),
    #[error("variable is not a parameter of this tape")]
    UnknownParameter,
    #[error("residual rank {r} out of range 1..{max}")]
    InvalidRank { r: usize, max: usize },
    #[error("expert index {index} out of range for {n_semantic} semantic experts")]
    InvalidExpertIndex { index: usize, n_semantic: usize },
    #[error("top-k {k} out of range 1..={n_semantic}")]
    InvalidTopK { k: usize, n_semantic: usize },
    #[error("pretraining reached accuracy {accuracy:.4}, below the {required:.2} floor")]
    PretrainDiverged { accuracy: f64, required: f64 },
    #[error("hard-sampling violation: {0}")]
    HardSamplingViolation(String),
    #[error("frozen parameter changed: {0}")]
    FreezeViolation(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("incomplete checkpoint: missing tensor `{0}`")]
    IncompleteCheckpoint(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidInput(_)
            | Error::UnknownParameter
            | Error::InvalidRank { .. }
            | Error::InvalidExpertIndex { .. }
            | Error::InvalidTopK { .. }
            | Error::HardSamplingViolation(_)
            | Error::Config(_) => 2,
            Error::NumericalFailure(_)
            | Error::PretrainDiverged { .. }
            | Error::FreezeViolation(_) => 3,
            Error::CorruptCheckpoint(_)
            | Error::UnsupportedVersion { .. }
            | Error::IncompleteCheckpoint(_)
            | Error::Io(_) => 4,
        }
    }
}
