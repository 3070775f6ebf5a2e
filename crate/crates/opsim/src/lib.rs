//! File formats, report and trace output, concurrent design-space search and
//! the `opsim` command line on top of [`opsim_core`].

use std::path::PathBuf;

pub mod cli;
pub mod format;
pub mod output;
pub mod scenario;
pub mod search;
pub mod sweep;

pub use opsim_core as core;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] opsim_core::Error),
}

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const CONFIG: i32 = 2;
    pub const SIMULATION: i32 = 3;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Parse { path: path.into(), msg: msg.to_string() }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Configuration and I/O problems map to 2, simulation failures to 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core(e) if !e.is_config() => exit::SIMULATION,
            _ => exit::CONFIG,
        }
    }
}
