use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TensorError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("loss is undefined: every position is ignored")]
    UndefinedLoss,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("index {index} out of range for {op} (bound {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("gradient requested for a value that is not a scalar (shape {0:?})")]
    NotScalar(Vec<usize>),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::Shape {
            op,
            detail: detail.into(),
        }
    }
}
