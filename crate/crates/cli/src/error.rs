use std::path::PathBuf;

use popbias::ErrorClass;
use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{message}")]
    ConfigAt {
        message: String,
        line: Option<usize>,
        key: Option<String>,
    },

    #[error("run directory {} is locked by {owner}", dir.display())]
    Locked { dir: PathBuf, owner: String },

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] popbias::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigAt { .. } => 2,
            CliError::Locked { .. } | CliError::Io { .. } => 3,
            CliError::Core(e) => match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::ConfigAt { .. } => "config",
            CliError::Locked { .. } => "locked",
            CliError::Io { .. } => "io",
            CliError::Core(e) => e.kind(),
        }
    }

    /// One line of JSON for stderr.
    pub fn to_json_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        let mut v = json!({ "error": self.kind(), "message": message.trim() });
        if let CliError::ConfigAt { line, key, .. } = self {
            if let Some(l) = line {
                v["line"] = json!(l);
            }
            if let Some(k) = key {
                v["key"] = json!(k);
            }
        }
        v.to_string()
    }
}
