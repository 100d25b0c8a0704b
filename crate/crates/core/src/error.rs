use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmgError {
    /// A serialized document does not match its schema. `field` names the offending key.
    #[error("schema violation at `{field}`: {reason}")]
    Schema { field: String, reason: String },

    #[error("invalid motion: {0}")]
    InvalidMotion(String),

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("unknown token `{0}`")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("prompt has {0} tokens, maximum is 32")]
    PromptTooLong(usize),

    #[error("nothing to generate: every frame is given")]
    NothingToGenerate,

    #[error("invalid position {position} for length {len}")]
    InvalidPosition { position: usize, len: usize },

    #[error("duplicate position {0}")]
    DuplicatePosition(usize),

    #[error("stage {stage} out of range 1..={max}")]
    StageOutOfRange { stage: usize, max: usize },

    #[error("diffusion step {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged at step {step}: loss {loss}")]
    NonFiniteLoss { step: u64, loss: f64 },

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("generation aborted after {completed_stages} completed stage(s)")]
    Aborted { completed_stages: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl PmgError {
    pub fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        PmgError::Schema {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = PmgError> = std::result::Result<T, E>;
