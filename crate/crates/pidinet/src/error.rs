use std::fmt;

/// Library-wide error type.
///
/// `Shape` covers dimension/argument validation, `Config` carries the byte
/// position of the first offending character in an architecture string,
/// `Format` is for malformed serialized data, and `Numeric` signals a
/// non-finite value escaping a computation (the message names the tensor).
#[derive(Debug)]
pub enum Error {
    Shape(String),
    Config { pos: usize, msg: String },
    Format(String),
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config { pos, msg } => write!(f, "config error at byte {pos}: {msg}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Numeric(m) => write!(f, "numeric failure: {m}"),
            Error::Io(e) => write!(f, "io error: {e}"),
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
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Shorthand used by the validation paths.
macro_rules! shape_err {
    ($($arg:tt)*) => {
        return Err($crate::error::Error::Shape(format!($($arg)*)))
    };
}
pub(crate) use shape_err;
