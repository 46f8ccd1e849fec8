use std::path::PathBuf;

use cda_core::CdaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: {hint}", .path.display())]
    MissingArtifact { path: PathBuf, hint: String },

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("workdir is in use by another run (lock file {})", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] CdaError),
}

impl CliError {
    /// 0 ok, 1 runtime failure, 2 config, 3 missing artifact, 4 lineage.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } => 3,
            CliError::Lineage(_) => 4,
            CliError::Locked(_) => 1,
            CliError::Core(e) => match e {
                CdaError::Spec(_) | CdaError::Validation(_) => 2,
                CdaError::MissingData(_) => 3,
                CdaError::Load { .. } => 3,
                _ => 1,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
