use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("model parameters are not initialized")]
    ModelNotInitialized,

    #[error("cannot power-normalize an all-zero frame")]
    DegenerateFrame,

    #[error("symbol frame carries no power-normalization scale")]
    MissingScale,

    #[error("bitmap keeps {bitmap} features but {received} were supplied")]
    BitmapMismatch { bitmap: usize, received: usize },

    #[error("symbol budget {budget} is below one feature ({per_feature} symbols)")]
    InfeasibleBudget { budget: usize, per_feature: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("frame violates the unit-power constraint (mean power {0})")]
    PowerConstraint(f64),

    #[error("similarity undefined for a zero-norm embedding")]
    UndefinedSimilarity,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error(transparent)]
    Frame(#[from] crate::framing::FrameError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
