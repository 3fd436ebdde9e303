//! Error types shared across the crate.
//!
//! Process exit codes: 0 success, 2 config error, 3 data/format error,
//! 4 convergence error, 1 everything else.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum UcanError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate vector: norm {norm:.3e} below minimum {min:.3e}")]
    DegenerateVector { norm: f64, min: f64 },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bad magic bytes in weight file")]
    BadMagic,

    #[error("weight file version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u8, expected: u8 },

    #[error("weight file truncated")]
    Truncated,

    #[error("weight file checksum mismatch")]
    CrcMismatch,

    #[error("did not converge: {0} (residual {1:.3e})")]
    Convergence(String, f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for UcanError {
    fn from(e: serde_json::Error) -> Self {
        UcanError::Format(e.to_string())
    }
}

impl UcanError {
    /// Exit code for the CLI surface.
    pub fn exit_code(&self) -> i32 {
        use UcanError::*;
        match self {
            Config(_) => 2,
            Data(_) | Format(_) | BadMagic | VersionMismatch { .. } | Truncated | CrcMismatch => 3,
            Convergence(_, _) => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, UcanError>;
