use thiserror::Error;

/// Errors raised by tensor primitives, layers and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },

    #[error("{op}: variance undefined for a population of {count} element(s)")]
    Population { op: &'static str, count: usize },

    #[error("cross-entropy: every pixel carries the ignore label")]
    AllIgnored,

    #[error("label {label} at pixel ({row}, {col}) is outside [0, {num_classes})")]
    LabelOutOfRange { label: i64, row: usize, col: usize, num_classes: usize },

    #[error("gradient check: {0}")]
    NonDeterministic(String),

    #[error("metrics: no valid pixels to evaluate")]
    EmptyEvaluation,

    #[error("training diverged at epoch {epoch}, iter {iter}: {detail}")]
    Diverged { epoch: usize, iter: usize, detail: String },

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Invalid { op, detail: detail.into() }
}
