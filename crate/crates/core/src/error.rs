use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("singular base vector: squared norm {norm_sq:e} is below the guard threshold")]
    SingularBase { norm_sq: f64 },

    #[error("singular suffix base at step {step}: squared norm {norm_sq:e} is below the guard threshold")]
    SingularSuffixBase { step: usize, norm_sq: f64 },

    #[error("context index {index} out of range for context of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: impl ToString, right: impl ToString) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_string(),
            right: right.to_string(),
        }
    }
}
