use mathmoe_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("empty text")]
    EmptyText,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: invalid record: {message}")]
    Validation { line: usize, message: String },

    #[error("invalid text: {0}")]
    InvalidText(String),

    #[error("text cannot be corrupted this way: {0}")]
    NotCorruptible(String),

    #[error("no maskable positions")]
    EmptySelection,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("batch composition error: {0}")]
    Composition(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("contrastive training needs at least two texts per batch")]
    NoNegatives,

    #[error("invalid refinement stage {0} (expected 1, 2 or 3)")]
    InvalidStage(u8),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("llm client error: {0}")]
    Client(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
