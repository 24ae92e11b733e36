use std::path::PathBuf;

use oodconcepts_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), reason: reason.into() }
    }

    /// 0 ok, 2 config, 3 I/O, 4 numeric or training, 5 shape or compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } | CliError::Format { .. } => 3,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Argument(_) => 2,
                CoreError::Data(_) => 3,
                CoreError::Numeric(_) | CoreError::Training { .. } | CoreError::State(_) => 4,
                CoreError::Shape(_) => 5,
            },
        }
    }
}
