//! Crate-wide error type and result alias.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A k-NN query asked for more neighbours than reference points exist.
    InsufficientReference { requested: usize, available: usize },
    /// Array dimensions do not line up for the requested operation.
    ShapeMismatch(String),
    /// A numeric or enum argument is outside its allowed range.
    InvalidArgument(String),
    /// An operation received an empty input it cannot work with.
    EmptyInput(&'static str),
    /// Diffusion step index outside `1..=T`.
    StepOutOfRange { t: usize, t_max: usize },
    /// A file did not start with the expected magic bytes.
    BadMagic { expected: &'static str, found: [u8; 4] },
    /// A file carries a format version this build does not understand.
    BadVersion { expected: u32, found: u32 },
    /// A file ended before its declared payload was complete.
    TruncatedPayload,
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InsufficientReference {
                requested,
                available,
            } => write!(
                f,
                "insufficient reference points: k={requested} but only {available} available"
            ),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::StepOutOfRange { t, t_max } => {
                write!(f, "diffusion step {t} outside 1..={t_max}")
            }
            Error::BadMagic { expected, found } => {
                write!(f, "bad magic: expected {expected:?}, found {found:?}")
            }
            Error::BadVersion { expected, found } => {
                write!(f, "bad version: expected {expected}, found {found}")
            }
            Error::TruncatedPayload => write!(f, "truncated payload"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        // Unexpected EOF while decoding a fixed-size payload means truncation.
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::TruncatedPayload
        } else {
            Error::Io(e)
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
