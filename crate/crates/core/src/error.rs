use std::fmt;

/// Crate-wide error type.
///
/// The variants map onto the process exit codes used by the CLI: contract,
/// shape, config and format errors are caller mistakes (exit 2), while
/// stream/bundle mismatches discovered during decode are data mismatches
/// (exit 3).
#[derive(Debug)]
pub enum Error {
    /// An operation was called with tensors of incompatible shape.
    Shape(String),
    /// An API precondition was violated (bad argument, wrong call order).
    Contract(String),
    /// Invalid or unparsable configuration.
    Config(String),
    /// Malformed serialized data (checkpoint or bitstream framing).
    Format(String),
    /// A bitstream does not match the model bundle it is being decoded with.
    StreamMismatch(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        Error::StreamMismatch(msg.into())
    }

    /// Process exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::StreamMismatch(_) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Contract(m) => write!(f, "contract violation: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Format(m) => write!(f, "format error: {m}"),
            Error::StreamMismatch(m) => write!(f, "stream mismatch: {m}"),
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
