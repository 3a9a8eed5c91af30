use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, OdmError>;

#[derive(Debug, Error)]
pub enum OdmError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("record {id}: {message}")]
    Validation { id: String, message: String },

    #[error("numerical failure at diffusion step {step}: {message}")]
    Numerical { step: usize, message: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("unknown {what}: {key}")]
    Lookup { what: &'static str, key: String },

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error on {path}: {message}")]
    Serde { path: PathBuf, message: String },
}

impl OdmError {
    pub fn argument(msg: impl Into<String>) -> Self {
        Self::Argument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn numerical(step: usize, msg: impl Into<String>) -> Self {
        Self::Numerical {
            step,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}
