use std::fmt::Display;

use serde_json::json;
use thiserror::Error;

/// A CLI failure. Usage and configuration problems exit with 2, everything
/// else with 1. Either way stderr gets one JSON line.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{kind}: {message}")]
    Operational { kind: &'static str, message: String },
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self::Config(message.into())
    }

    pub fn operational(kind: &'static str, err: impl Display) -> Self {
        Self::Operational {
            kind,
            message: err.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 2,
            Self::Operational { .. } => 1,
        }
    }

    /// Single-line machine-readable form.
    pub fn to_json_line(&self) -> String {
        let (kind, message) = match self {
            Self::Usage(m) => ("usage", m.as_str()),
            Self::Config(m) => ("config", m.as_str()),
            Self::Operational { kind, message } => (*kind, message.as_str()),
        };
        json!({"error": kind, "message": message}).to_string()
    }
}
