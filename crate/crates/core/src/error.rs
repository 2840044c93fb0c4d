use std::path::PathBuf;

/// Errors surfaced by dataset loading, checkpointing, and numerics.
///
/// Shape and index violations inside the math layer are programming errors
/// and panic instead; this enum covers failures driven by data.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("singular matrix{}", match .attribute { Some(a) => format!(" while inverting operator for attribute '{a}'"), None => String::new() })]
    SingularMatrix { attribute: Option<String> },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("{0}")]
    Validation(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 for validation/parse problems,
    /// 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SingularMatrix { .. } | Error::NonFinite(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
