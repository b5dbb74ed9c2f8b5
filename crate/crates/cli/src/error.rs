use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config file, override, grid or flag. Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] chronomerge::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Output(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) if is_config_error(e) => 2,
            _ => 1,
        }
    }
}

/// Core errors that can only come from bad settings.
pub fn is_config_error(e: &chronomerge::Error) -> bool {
    use chronomerge::Error::*;
    matches!(
        e,
        InvalidConfig(_)
            | InvalidProbability(_)
            | InvalidThresholds { .. }
            | InvalidDimensions(_)
            | InvalidCount(_)
            | InvalidWeights(_)
    )
}
