//! Error type shared by the whole engine.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("invalid topology: {0}")]
    Topology(String),

    #[error("invalid scenario data: {0}")]
    Scenario(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("matrix assembly failed: {0}")]
    Assembly(String),

    #[error("solver did not converge: {0}")]
    Convergence(String),

    #[error("integration failed at t = {t} s: {message}")]
    Integration { t: f64, message: String },

    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Exit code for the CLI: 1 for input/validation problems, 2 for
    /// numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::Topology(_)
            | Error::Scenario(_)
            | Error::Config(_) => 1,
            Error::NonFinite(_)
            | Error::Assembly(_)
            | Error::Convergence(_)
            | Error::Integration { .. } => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
