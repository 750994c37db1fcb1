use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MtlError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MtlError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("corrupt artifact {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl MtlError {
    pub fn contract(msg: impl Into<String>) -> Self {
        MtlError::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        MtlError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        MtlError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MtlError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            MtlError::Config(_) => 2,
            MtlError::Data(_) | MtlError::Io { .. } => 3,
            MtlError::Numerical(_) => 4,
            MtlError::Corrupt { .. } => 5,
            // Contract and dimension violations reaching the CLI come from
            // inputs that disagree with the configured model.
            MtlError::Contract(_) | MtlError::Dimension { .. } => 2,
        }
    }
}
