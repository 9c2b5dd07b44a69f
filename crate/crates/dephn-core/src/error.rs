//! Crate-wide error type for everything above the tape layer.

use thiserror::Error;

use crate::tape::TapeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Data(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("training aborted: {0}")]
    Train(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
