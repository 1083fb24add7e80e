use thiserror::Error;

#[derive(Debug, Error)]
pub enum GemError {
    #[error("malformed graph: {0}")]
    MalformedGraph(String),

    #[error("invalid graph spec: {0}")]
    InvalidSpec(String),

    #[error("not a permutation: {0}")]
    InvalidPermutation(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("edit out of range: {0}")]
    InvalidEdit(String),

    #[error("non-finite value in {stage} (layer {layer})")]
    Numeric { stage: &'static str, layer: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("state space has {states} graphs, refusing to enumerate more than {limit}")]
    StateSpaceTooLarge { states: u128, limit: u128 },

    #[error("could not satisfy valence rules: {0}")]
    Unsatisfiable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("check failed: {0}")]
    CheckFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl GemError {
    /// True for errors caused by bad user input rather than runtime failure.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            GemError::MalformedGraph(_)
                | GemError::InvalidSpec(_)
                | GemError::InvalidArgument(_)
                | GemError::Config(_)
                | GemError::Json(_)
                | GemError::Empty(_)
                | GemError::StateSpaceTooLarge { .. }
        )
    }
}

pub type Result<T, E = GemError> = std::result::Result<T, E>;
