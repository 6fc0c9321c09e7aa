use thiserror::Error;

use crate::wick::LadderOp;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("operator string length {0} is odd; pairings need an even count")]
    OddOperatorCount(usize),

    #[error("operator string length {len} exceeds the pairing cap {cap}")]
    PairingCapExceeded { len: usize, cap: usize },

    #[error("pair moment table has no entry for ({0}, {1})")]
    MissingPairMoment(LadderOp, LadderOp),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("transparency {value} at pixel {pixel} is outside [0, 1]")]
    TransparencyOutOfRange { pixel: usize, value: f64 },

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("non-finite value at reduction iteration {iteration}")]
    NonFinite { iteration: usize },

    #[error("denominator is singular in {0}")]
    Singular(&'static str),

    #[error("{0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn mismatch(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::DimensionMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
