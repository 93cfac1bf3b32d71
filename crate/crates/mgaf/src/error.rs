use std::io;
use std::path::{Path, PathBuf};

/// Errors from file handling, configuration and the wrapped numeric core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Core {
        context: String,
        #[source]
        source: mgaf_core::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        Error::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub(crate) fn format(path: &Path, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.to_path_buf(),
            msg: msg.into(),
        }
    }

    /// Process exit code: 3 for numerical failures, 2 for everything else
    /// (bad data, bad config, I/O).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Core {
                source: mgaf_core::Error::Numerical(_),
                ..
            } => 3,
            _ => 2,
        }
    }
}

/// Attaches a description of the failing stage to core errors.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> Context<T> for mgaf_core::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Core {
            context: what(),
            source,
        })
    }
}
