use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph:\n{0}")]
    InvalidGraph(crate::graph::ValidationReport),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),

    #[error("non-finite loss: {term} became {value} at step {step}")]
    NonFiniteLoss {
        term: &'static str,
        value: f64,
        step: usize,
    },

    #[error("non-finite loss value returned to fd_check")]
    NonFiniteFdLoss,

    #[error("unknown init scheme '{0}' (expected 'glorot' or 'zeros')")]
    UnknownScheme(String),

    #[error("unknown parameter '{0}'")]
    UnknownParam(String),

    #[error("center node required for node-level readout")]
    MissingCenter,

    #[error("metric {metric} is incompatible with this task: {reason}")]
    MetricTaskMismatch { metric: String, reason: String },

    #[error("could not generate dataset: {0}")]
    Synthesis(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("failed to parse {path}: {source}")]
    BundleParse {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("invalid bundle {path}: {reason}")]
    BundleInvalid { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
