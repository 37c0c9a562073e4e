use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("prompt produced no tokens")]
    EmptyPrompt,

    #[error("supervision error: {0}")]
    Supervision(String),

    #[error("frame {got} presented out of order (expected {expected})")]
    Sequencing { expected: usize, got: usize },

    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("scenario unavailable: {0}")]
    ScenarioUnavailable(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
