use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape does not fit on its canvas, or its parts are inconsistent.
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Arrays with incompatible sizes were combined.
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("corrupt measurement set: {0}")]
    Corruption(String),
    #[error("measurement set is empty")]
    EmptySet,
    #[error("data error: {0}")]
    Data(String),
    #[error("estimation error: {0}")]
    Estimation(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(
        "solver did not reach tolerance {rel_tol:e} in {iters} iterations (last change {last:e})"
    )]
    NotConverged {
        iters: usize,
        rel_tol: f64,
        last: f64,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

impl Error {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) | Error::Format { .. } | Error::Corruption(_) => 2,
            Error::NotConverged { .. } => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub(crate) fn parameter(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
