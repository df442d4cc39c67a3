use std::path::PathBuf;

/// Errors raised anywhere in the pipeline. Variants are grouped by the
/// process exit code the CLI maps them to.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("waveform length {len} is not divisible by hop {hop}: last frame boundary at sample {boundary}")]
    FrameBoundary { len: usize, hop: usize, boundary: usize },

    #[error("sequence of {positions} positions exceeds the context limit of {limit}; {hint}")]
    ContextOverflow {
        positions: usize,
        limit: usize,
        hint: &'static str,
    },

    #[error("non-finite loss at iteration {iter}: t = {t}, token {token}")]
    NonFiniteLoss { iter: u64, t: f64, token: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::ContextOverflow { .. } => 2,
            Error::NonFiniteLoss { .. } | Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
