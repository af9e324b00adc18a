use thiserror::Error;

#[derive(Debug, Error)]
pub enum GlareError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation after block {block}")]
    NumericFault { block: usize },

    #[error("non-finite loss term `{term}` ({detail})")]
    NonFiniteLoss { term: String, detail: String },

    #[error("block index {index} out of range for depth {depth}")]
    BlockIndex { index: isize, depth: usize },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: String, expected: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GlareError {
    /// NaN or infinity in activations or losses, as opposed to bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, GlareError::NumericFault { .. } | GlareError::NonFiniteLoss { .. })
    }
}

pub type Result<T, E = GlareError> = std::result::Result<T, E>;
