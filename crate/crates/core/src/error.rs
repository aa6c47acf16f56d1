use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("non-finite gradient for layer {layer} {kind} index {index}")]
    NonFiniteGradient {
        layer: usize,
        kind: &'static str,
        index: usize,
    },

    #[error("effective radius is negative ({epsilon_bar:.6e}) for batch transition {index}")]
    NegativeEpsilonBar { index: usize, epsilon_bar: f64 },

    #[error("ambiguity set is empty: {0}")]
    Infeasible(String),

    #[error("{path}:{line}: {message}")]
    Ingestion {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
