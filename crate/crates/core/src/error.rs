use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the pipeline. Each variant maps onto one CLI exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate output: {0}")]
    DegenerateOutput(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 missing artifact, 5 degenerate training.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Format(_) | Error::Data(_) | Error::DegenerateOutput(_) => 3,
            Error::MissingArtifact(_) => 4,
            Error::DegenerateBatch(_) | Error::Training(_) => 5,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 4,
            Error::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
