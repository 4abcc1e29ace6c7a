use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// `Config` -> 2, `Dependency` -> 3, `Diverged` -> 4, everything else -> 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("numeric divergence at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
