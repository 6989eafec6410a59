use thiserror::Error;

/// Errors raised by the alignment toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error(
        "singular system in {context}: condition number {condition:.3e} exceeds guard{advice}"
    )]
    Singular {
        context: &'static str,
        condition: f64,
        advice: &'static str,
    },

    #[error("training diverged at epoch {epoch}: loss {loss:.6e} ({reason})")]
    Divergence {
        epoch: usize,
        loss: f64,
        reason: &'static str,
    },

    #[error("degenerate feature (zero norm) at {what} index {index}")]
    DegenerateFeature { what: &'static str, index: usize },

    #[error("all-zero feature matrix cannot be power-normalized")]
    ZeroPower,

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("anchor mismatch: encoder fingerprint {encoder} != decoder fingerprint {decoder}")]
    AnchorMismatch { encoder: String, decoder: String },
}

impl Error {
    /// Whether the error stems from a numerical failure (singularity,
    /// divergence, degenerate features) rather than invalid input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Singular { .. }
                | Error::Divergence { .. }
                | Error::DegenerateFeature { .. }
                | Error::ZeroPower
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Validation(msg()))
    }
}
