use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the adaptation pipeline.
#[derive(Debug, Error)]
pub enum CdaError {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("missing data files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingData(Vec<PathBuf>),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("label guard: training code attempted to read the label of target sample `{0}`")]
    LabelGuard(String),

    #[error("invalid synthetic spec: {0}")]
    Spec(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty active set: a training stage needs at least one sample")]
    EmptyActiveSet,

    #[error("non-finite loss `{loss}` at step {step}: {hint}")]
    NonFinite { loss: String, step: usize, hint: String },

    #[error("frozen parameters of `{0}` were modified")]
    FrozenViolation(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = CdaError> = std::result::Result<T, E>;

impl CdaError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CdaError::Io {
            path: path.into(),
            source,
        }
    }
}
