use std::fmt;

/// Crate-wide error type.
///
/// Variants map onto the failure classes the CLI distinguishes:
/// `Shape`/`Usage`/`Config`/`Format`/`Data` are validation failures
/// (exit code 1), `Numerical` is a runtime numeric failure (exit code 2).
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes do not compose for the requested operation.
    Shape(String),
    /// An operation was called outside its contract.
    Usage(String),
    /// A configuration value is out of range or inconsistent.
    Config(String),
    /// A file did not match its declared on-disk schema.
    Format(String),
    /// A dataset record is malformed or inconsistent.
    Data(String),
    /// NaN/Inf encountered, or a gradient check failed.
    Numerical(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Usage(m) => write!(f, "usage error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Numerical(m) => write!(f, "numerical error: {m}"),
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
        Error::Io(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! format_err {
    ($($arg:tt)*) => { $crate::error::Error::Format(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}

pub(crate) use {config_err, data_err, format_err, shape_err, usage_err};
