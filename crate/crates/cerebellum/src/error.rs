use std::path::{Path, PathBuf};

/// Failures surfaced by the harness, grouped by CLI exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("{path}: parse error at byte {offset}: {message}")]
    Parse {
        path: PathBuf,
        offset: u64,
        message: String,
    },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    /// Sanity gates or sweep points failed; outputs were still written.
    #[error("{0}")]
    Failed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.as_ref().to_path_buf();
        move |source| Error::Io { path, source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Failed(_) => 1,
            Error::Config(_) => 2,
            Error::Data(_) | Error::Parse { .. } | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
        }
    }
}

impl From<cerebellum_core::Error> for Error {
    fn from(e: cerebellum_core::Error) -> Self {
        use cerebellum_core::Error as E;
        match e {
            E::Config(_) | E::Param(_) => Error::Config(e.to_string()),
            E::Shape { .. } | E::Data(_) => Error::Data(e.to_string()),
            E::NonFinite { .. } | E::State(_) => Error::Numeric(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(format!("invalid JSON: {e}"))
    }
}
