use alloc::string::String;

/// Errors raised by the numeric, diffusion, fusion and metric routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// An argument violated a shape or range precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// An operation was attempted before its required state existed.
    #[error("invalid state: {0}")]
    State(String),
}

pub type Result<T> = core::result::Result<T, Error>;

macro_rules! invalid {
    ($($arg:tt)*) => {
        $crate::error::Error::InvalidArgument(alloc::format!($($arg)*))
    };
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err($crate::error::invalid!($($arg)*));
        }
    };
}

pub(crate) use ensure;
pub(crate) use invalid;
