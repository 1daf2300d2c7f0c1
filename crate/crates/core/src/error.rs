use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("geometry: {0}")]
    Geometry(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short module/kind tag used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Geometry(_) => "geometry",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numeric(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
