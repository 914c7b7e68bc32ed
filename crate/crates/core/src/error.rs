use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("invalid hyperparameter for {op}: {detail}")]
    InvalidHyperparameter { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("too few samples: need more than {needed}, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("null accuracy must be positive, got {0}")]
    ZeroNull(f64),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid sigma: {0}")]
    InvalidSigma(String),

    #[error("head/confounder mismatch: adversary head is {head}, dataset confounder is {confounder}")]
    HeadMismatch { head: String, confounder: String },

    #[error("format mismatch: {0}")]
    FormatMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch { op, detail: detail.into() }
}

pub(crate) fn hyper_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::InvalidHyperparameter { op, detail: detail.into() }
}
