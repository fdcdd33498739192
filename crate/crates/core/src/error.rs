use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("integration failed at t = {t:.1} s: sub-step {substep:.3e} s below minimum")]
    Integration { t: f64, substep: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence too short: need at least {needed} samples, got {got}")]
    Length { needed: usize, got: usize },

    #[error("degenerate range: {0}")]
    DegenerateRange(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("invalid update frequency {f}: {reason}")]
    InvalidFrequency { f: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing dependency: {0}")]
    MissingDependency(String),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
