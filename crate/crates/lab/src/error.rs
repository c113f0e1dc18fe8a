use std::path::PathBuf;

use recon_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed checkpoint: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            LabError::Config(_) => 2,
            LabError::Core(e) => match e {
                CoreError::InvalidConfig(_)
                | CoreError::InvalidGranularity(_)
                | CoreError::Pattern(_)
                | CoreError::CorpusTooSmall { .. }
                | CoreError::HoldoutTooShort { .. } => 2,
                CoreError::NotPositiveDefinite { .. }
                | CoreError::SingularNormalMatrix { .. }
                | CoreError::NonFiniteLoss { .. } => 3,
                _ => 1,
            },
            _ => 1,
        }
    }
}
