use std::time::Duration;

use thiserror::Error;

/// Errors surfaced by the runtime and its library entry points.
#[derive(Debug, Error)]
pub enum SchedError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gang of {requested} members cannot be reserved on {available} workers")]
    Capacity { requested: usize, available: usize },

    #[error("usage error: {0}")]
    Usage(&'static str),

    #[error("internal invariant violated: {0}")]
    Invariant(&'static str),

    #[error("no scheduling progress within {0:?}; run aborted as deadlocked")]
    Deadlock(Duration),

    #[error("a context body panicked: {0}")]
    Panicked(String),

    #[error("runtime was aborted")]
    Aborted,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = SchedError> = std::result::Result<T, E>;
