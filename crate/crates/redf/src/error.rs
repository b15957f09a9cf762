use std::fmt;
use std::io;
use std::path::Path;

/// Failure classes of a command, each with its own exit code.
#[derive(Debug)]
pub enum RunError {
    /// Bad flags, unknown keys or invalid configuration values.
    Usage(String),
    /// Missing, malformed or mismatched input files.
    Data(String),
    /// Non-finite losses, gradients or scores.
    Numeric(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 1,
            RunError::Data(_) => 2,
            RunError::Numeric(_) => 3,
        }
    }

    pub fn io(path: &Path, err: io::Error) -> Self {
        RunError::Data(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Usage(m) => write!(f, "usage error: {m}"),
            RunError::Data(m) => write!(f, "data error: {m}"),
            RunError::Numeric(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<redf_core::Error> for RunError {
    fn from(e: redf_core::Error) -> Self {
        use redf_core::Error as E;
        match e {
            E::InvalidConfig(_) | E::UnknownKey(_) => RunError::Usage(e.to_string()),
            E::NonFinite(_) => RunError::Numeric(e.to_string()),
            _ => RunError::Data(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for RunError {
    fn from(e: serde_json::Error) -> Self {
        RunError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RunError>;
