use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] fjlab_core::Error),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("unsupported schema_version {0:?} (expected \"1\")")]
    SchemaVersionUnsupported(String),

    #[error("sample {sample_id:?} round {round} agent {agent}: {reason}")]
    InvariantViolation {
        sample_id: String,
        round: usize,
        agent: usize,
        reason: String,
    },

    #[error("sample {sample_id:?}: {reason}")]
    BadSample { sample_id: String, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("no fitted parameters for sample {0:?}")]
    MissingParams(String),

    #[error("sample {0:?} has no correct_label")]
    MissingLabels(String),

    #[error("verification failed: {}", .0.join(", "))]
    VerifyFailed(Vec<String>),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 validation error, 2 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}
