use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A shape, index or argument precondition did not hold.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A computation produced or encountered a non-finite or undefined value.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A binary file did not match its declared layout.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)*)));
        }
    };
}

pub(crate) use contract;
pub(crate) use ensure;
