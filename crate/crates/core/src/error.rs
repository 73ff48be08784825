use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::engine::SimTime;

/// Failures inside a running simulation. All of these indicate either a
/// logic bug or a misconfigured cluster; the run cannot continue.
#[derive(Debug, Error)]
pub enum SimError {
    #[error("event scheduled at {at} before current clock {now}")]
    ScheduledInPast { at: SimTime, now: SimTime },

    #[error("livelock: more than {limit} events fired (clock at {at})")]
    Livelock { limit: u64, at: SimTime },

    #[error("request {request} needs {needed} KV pages but instance capacity is {capacity}")]
    RequestExceedsCapacity {
        request: u32,
        needed: u64,
        capacity: u64,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),
}

/// Configuration problems. `key` names the offending setting.
#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: {reason}")]
    Invalid { key: String, reason: String },

    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{key}: {message}")]
    Parse { key: String, message: String },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {reason}")]
    Malformed { line: u64, reason: String },

    #[error("trace header must be `arrival_us,prompt_len,decode_len[,sla_us]`, found `{0}`")]
    Header(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Top-level error for running an experiment end to end.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Sim(#[from] SimError),

    #[error(transparent)]
    Trace(#[from] TraceError),

    #[error("summaries are not comparable: {0}")]
    Mismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Trace(_) => 2,
            Error::Sim(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
