//! Crate-wide error type.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    /// Input was not in the order an operation requires.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("missing scores for ids {ids:?}")]
    MissingScores { ids: Vec<i64> },

    #[error("template error: {0}")]
    Template(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error after {attempts} attempt(s){}: {message}", status_suffix(*.status))]
    Transport {
        message: String,
        status: Option<u16>,
        attempts: u32,
    },

    #[error("could not parse a 0-10 score from reply {0:?}")]
    ScoringParse(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn status_suffix(status: Option<u16>) -> String {
    status.map(|s| format!(" (last status {s})")).unwrap_or_default()
}

/// Coarse error class shared by the REST layer and the CLI exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    NotFound,
    Validation,
    State,
    Transport,
    Internal,
}

impl Error {
    pub fn code(&self) -> ErrorCode {
        match self {
            Error::NotFound(_) => ErrorCode::NotFound,
            Error::State(_) => ErrorCode::State,
            Error::Transport { .. } => ErrorCode::Transport,
            Error::Io(_) => ErrorCode::Internal,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Contract(_)
            | Error::MissingScores { .. }
            | Error::Template(_)
            | Error::Config(_)
            | Error::ScoringParse(_)
            | Error::InsufficientData(_)
            | Error::Json(_) => ErrorCode::Validation,
        }
    }

    /// Structured extras for API error bodies.
    pub fn details(&self) -> Option<BTreeMap<String, serde_json::Value>> {
        let mut map = BTreeMap::new();
        match self {
            Error::Parse { line, .. } => {
                map.insert("line".into(), (*line).into());
            }
            Error::MissingScores { ids } => {
                map.insert("missing_ids".into(), ids.clone().into());
            }
            Error::Transport {
                status, attempts, ..
            } => {
                map.insert("attempts".into(), (*attempts).into());
                map.insert("last_status".into(), (*status).into());
            }
            _ => return None,
        }
        Some(map)
    }
}
