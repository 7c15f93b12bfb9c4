//! Pipeline orchestration: flat key-value configuration, stage running
//! with artifact hashing and prerequisite checks, and the ablation grid.

pub mod config;
pub mod pipeline;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {artifact}; run `sidrec {stage}` first")]
    Prerequisite { artifact: String, stage: String },

    #[error("stale artifact {artifact} (config hash changed); re-run `sidrec {stage}`")]
    Stale { artifact: String, stage: String },

    #[error(transparent)]
    Core(#[from] sidrec_core::Error),

    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// Exit codes: 2 config, 3 prerequisite, 4 runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Prerequisite { .. } | CliError::Stale { .. } => 3,
            CliError::Core(sidrec_core::Error::Config(_)) => 2,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
