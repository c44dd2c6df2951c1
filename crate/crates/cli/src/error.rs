use std::path::PathBuf;

use duocast_script::{Rule, ScriptError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite {what} at {} (run `duocast {hint}` first)", path.display())]
    Prerequisite { what: &'static str, path: PathBuf, hint: &'static str },
    #[error("script validation failed ({}); report at {}", rules.iter().map(|r| r.id()).collect::<Vec<_>>().join(", "), report.display())]
    Validation { rules: Vec<Rule>, report: PathBuf },
    #[error("stage {stage}: {source}")]
    Script { stage: &'static str, source: ScriptError },
    #[error("stage {stage}: {source}")]
    Core { stage: &'static str, source: duocast_core::Error },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 1 for failures the user can fix (config, inputs, prerequisites), 2 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Prerequisite { .. } | CliError::Validation { .. } => 1,
            CliError::Script { source, .. } => match source {
                ScriptError::Core(_) | ScriptError::Io(_) => 2,
                _ => 1,
            },
            CliError::Core { source, .. } => match source {
                duocast_core::Error::InvalidConfig(_) | duocast_core::Error::ContextOverflow { .. } => 1,
                _ => 2,
            },
            CliError::Io { .. } => 2,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Attaches a stage name to library errors.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for duocast_core::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}

impl<T> StageExt<T> for duocast_script::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|source| CliError::Script { stage, source })
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}
