use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

/// Command failures. Each variant has a stable machine-readable kind.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("file not found: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("invalid config key '{key}' in {}", .path.display())]
    InvalidConfigKey { key: String, path: PathBuf },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad checkpoint {}: {msg}", .path.display())]
    Checkpoint { path: PathBuf, msg: String },
    #[error("bad data: {0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {}: {source}", .path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{0}")]
    Internal(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::MissingFile(_) => "missing_file",
            CliError::InvalidConfigKey { .. } => "invalid_config_key",
            CliError::InvalidConfig(_) => "invalid_config",
            CliError::ShapeMismatch(_) => "shape_mismatch",
            CliError::Checkpoint { .. } => "checkpoint",
            CliError::Data(_) => "data",
            CliError::Usage(_) => "usage",
            CliError::Io { .. } => "io",
            CliError::Internal(_) => "internal",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    /// Single-line JSON object `{"error": kind, "message": text}`.
    pub fn to_line(&self) -> String {
        let message = self.to_string().replace('\n', " ");
        serde_json::json!({ "error": self.kind(), "message": message }).to_string()
    }

    pub fn io(path: &Path, source: io::Error) -> CliError {
        if source.kind() == io::ErrorKind::NotFound {
            CliError::MissingFile(path.to_path_buf())
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    /// Maps a core error raised while working on `path`.
    pub fn at(path: &Path, e: geopath::Error) -> CliError {
        match e {
            geopath::Error::Io(source) => CliError::io(path, source),
            geopath::Error::Checkpoint(msg) => CliError::Checkpoint {
                path: path.to_path_buf(),
                msg,
            },
            geopath::Error::Json(err) => CliError::Checkpoint {
                path: path.to_path_buf(),
                msg: err.to_string(),
            },
            geopath::Error::Csv { row, msg } => {
                CliError::Data(format!("{} line {row}: {msg}", path.display()))
            }
            other => CliError::from(other),
        }
    }
}

impl From<geopath::Error> for CliError {
    fn from(e: geopath::Error) -> Self {
        use geopath::Error as E;
        match e {
            E::Shape { op, detail } => CliError::ShapeMismatch(format!("{op}: {detail}")),
            E::Config(msg) => CliError::InvalidConfig(msg),
            E::UnknownName { .. } => CliError::Usage(e.to_string()),
            E::InvalidLabel { .. } | E::EmptyDataset | E::Csv { .. } | E::Coordinate(_) => {
                CliError::Data(e.to_string())
            }
            other => CliError::Internal(other.to_string()),
        }
    }
}
