use alloc::string::String;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration value violates its constraints.
    InvalidConfig(String),
    /// `key = value` refers to a key that does not exist.
    UnknownKey(String),
    /// Tensor or window shapes do not line up.
    ShapeMismatch { expected: String, found: String },
    /// The window is shorter than one patch.
    WindowTooShort { len: usize, patch: usize },
    /// A slice request falls outside the series.
    OutOfBounds { needed: usize, available: usize },
    /// Input data is malformed (non-binary labels, overlapping events, ...).
    InvalidData(String),
    /// Loss or parameters became NaN/inf.
    NonFinite(String),
    /// Pooled scores were empty.
    Empty(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(m) => write!(f, "invalid configuration: {m}"),
            Error::UnknownKey(k) => write!(f, "unknown configuration key `{k}`"),
            Error::ShapeMismatch { expected, found } => {
                write!(f, "shape mismatch: expected {expected}, found {found}")
            }
            Error::WindowTooShort { len, patch } => {
                write!(f, "window of length {len} is shorter than patch size {patch}")
            }
            Error::OutOfBounds { needed, available } => {
                write!(f, "need {needed} timesteps but only {available} are available")
            }
            Error::InvalidData(m) => write!(f, "invalid data: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Empty(what) => write!(f, "{what} is empty"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(expected: &[usize], found: &[usize]) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        found: alloc::format!("{found:?}"),
    }
}
