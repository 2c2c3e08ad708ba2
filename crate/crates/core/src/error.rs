use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// A NaN (or otherwise unusable value) reached a numeric primitive.
    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// `exp(log_z)` is not representable; callers should stay in log space.
    #[error("partition function overflows (log Z = {log_z}); use the energy (log form) instead")]
    Overflow { log_z: f64 },

    /// Every partial handed to the combiner was empty for at least one row.
    #[error("no keys attended for row {row}")]
    NoKeysAttended { row: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("participant {index} out of range for {participants} participants")]
    ParticipantOutOfRange { index: usize, participants: usize },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
