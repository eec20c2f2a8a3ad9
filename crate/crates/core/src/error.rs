use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("link error at line {line}: unknown item token {token:?}")]
    Link { line: usize, token: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: bpr={bpr} aug={aug} align={align} gate={gate} reg={reg}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        bpr: f64,
        aug: f64,
        align: f64,
        gate: f64,
        reg: f64,
    },

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
