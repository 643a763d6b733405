use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("function is not deterministic between evaluations")]
    NonDeterministic,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("bad magic in splat file (expected \"SRSP\")")]
    BadMagic,

    #[error("unsupported splat file version {0}")]
    Version(u32),

    #[error("splat file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("{0} trailing bytes after the last splat record")]
    TrailingBytes(usize),

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("reference provider unavailable: {0}")]
    Unavailable(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// Process exit code for the command line tool: 1 validation, 2 I/O, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_) | Error::Invalid(_) | Error::UnknownScene(_) => 1,
            Error::NonFinite { .. } | Error::NonDeterministic => 3,
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::BadMagic
            | Error::Version(_)
            | Error::Truncated { .. }
            | Error::TrailingBytes(_)
            | Error::Unavailable(_) => 2,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
