use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// A state component became NaN or infinite.
    #[error("non-finite state after step {step}")]
    BlowUp { step: usize },

    #[error("{failed} of {total} realizations failed (limit {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: usize,
    },

    #[error("shooting blew up at step {step} for initial momenta {p0:?}")]
    ShootingBlowUp { step: usize, p0: Vec<f64> },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}

pub(crate) fn ensure_finite(context: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{context}: non-finite component")))
    }
}

pub(crate) fn ensure_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}
