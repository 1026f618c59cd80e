use std::path::{Path, PathBuf};

/// Errors of the std layer. Every variant maps to one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Format { path: PathBuf, line: usize, message: String },
    #[error("{}: unsupported format version {found:?} (expected {expected:?})", path.display())]
    Version { path: PathBuf, found: String, expected: &'static str },
    #[error(transparent)]
    Core(#[from] keysched_core::Error),
}

impl CliError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Self::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, line: usize, message: impl Into<String>) -> Self {
        Self::Format { path: path.as_ref().to_path_buf(), line, message: message.into() }
    }

    /// 2 for configuration problems, 3 for file problems, 4 for failures of
    /// the computation itself.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Core(keysched_core::Error::Config { .. }) => 2,
            Self::Io { .. } | Self::Format { .. } | Self::Version { .. } => 3,
            Self::Core(_) => 4,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
