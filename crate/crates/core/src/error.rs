use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A config value violates one of its documented invariants.
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },

    #[error("{path}: line {line}: {reason}")]
    Parse {
        path: PathBuf,
        line: u64,
        reason: String,
    },

    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Config { path: PathBuf, reason: String },

    /// The scheduler produced a plan that does not match the engine state.
    #[error("plan mismatch: {0}")]
    PlanMismatch(String),

    #[error("simulation exceeded max_sim_s={limit_s} s at t={clock_s:.3} s with {unfinished} unfinished requests")]
    Horizon {
        limit_s: f64,
        clock_s: f64,
        unfinished: usize,
    },

    #[error("{0}")]
    Empty(&'static str),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
