use std::path::PathBuf;

/// Failures surfaced by the command layer; each maps onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("nothing to report in {dir}; expected {expected}")]
    NoArtifacts { dir: PathBuf, expected: String },
    #[error(transparent)]
    Core(#[from] unidec_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Core(unidec_core::Error::InvalidConfig(_)) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type CliResult<T> = Result<T, CliError>;
