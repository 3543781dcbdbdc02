use thiserror::Error;

/// Errors surfaced by simulation, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    /// A rollout or gradient pass produced a non-finite number. The path and
    /// step identify the offending sample so divergence is diagnosable.
    #[error("non-finite {what} at path {path}, step {step} (value {value})")]
    NonFinite {
        what: &'static str,
        path: usize,
        step: usize,
        value: f64,
    },

    #[error("non-finite {what} at index {index} (value {value})")]
    NonFiniteEntry {
        what: &'static str,
        index: usize,
        value: f64,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
