use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] apanet_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint fingerprint {found} does not match config fingerprint {expected} (use --force to override)")]
    Fingerprint { expected: String, found: String },
    #[error("training diverged at step {step}; last good checkpoint kept at {kept}")]
    Diverged { step: u64, kept: String },
    #[error("plot error: {0}")]
    Plot(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    /// Process exit code: 1 for usage/configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Fingerprint { .. } => 1,
            Error::Core(e) if matches!(e, apanet_core::Error::Config(_)) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
