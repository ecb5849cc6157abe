use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the numerical pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor or configuration shapes do not chain.
    Shape(String),
    /// A configuration value violates its documented range.
    Config(String),
    /// An input record violates a type invariant (bad coordinate, polarity, ...).
    InvalidInput(String),
    /// A NaN or infinity appeared; the message names where.
    NonFinite(String),
    /// Distances between geographic and planar poses are undefined.
    MixedCoordinateModes,
    /// Retrieval needs at least one database entry.
    EmptyDatabase,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Config(m) => write!(f, "invalid configuration: {m}"),
            Error::InvalidInput(m) => write!(f, "invalid input: {m}"),
            Error::NonFinite(m) => write!(f, "non-finite value in {m}"),
            Error::MixedCoordinateModes => f.write_str("poses use different coordinate modes"),
            Error::EmptyDatabase => f.write_str("database is empty"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
