use std::path::Path;

/// Failure of a command, mapped onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Core(dynsparse_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io { .. } | CliError::Format(_) => 4,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<dynsparse_core::Error> for CliError {
    fn from(e: dynsparse_core::Error) -> Self {
        match e {
            dynsparse_core::Error::Divergence { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Core(other),
        }
    }
}
