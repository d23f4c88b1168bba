use std::path::PathBuf;

use kdsrl::{ConfigError, DataError, TrainError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("missing {what} {} ({hint})", path.display())]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        hint: &'static str,
    },
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] kdsrl::Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Core(e.into())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::MissingArtifact { .. } => "missing-input",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Core(e) if e.is_missing_input() => "missing-input",
            CliError::Core(kdsrl::Error::Config(ConfigError::Missing { .. })) => "missing-input",
            CliError::Core(kdsrl::Error::Config(_)) => "config",
            CliError::Core(e) if e.is_divergence() => "divergence",
            CliError::Core(_) => "failed",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind() {
            "missing-input" => 2,
            "config" | "usage" => 3,
            "divergence" => 4,
            _ => 1,
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {msg}", self.kind())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
