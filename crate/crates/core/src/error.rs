//! Error type shared by all modules.

use thiserror::Error;

/// Unified error for dataset, numeric, and training failures.
#[derive(Debug, Error)]
pub enum CdaError {
    /// Underlying I/O failure while reading or writing an artifact.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file did not conform to its declared format.
    #[error("malformed {format} file {path}: {detail}")]
    Format {
        format: &'static str,
        path: String,
        detail: String,
    },

    /// An argument violated a documented precondition.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Two operands had incompatible dimensions.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// A vector that must have positive norm was zero.
    #[error("zero-norm vector at index {index}")]
    ZeroNorm { index: usize },

    /// Training produced a non-finite loss.
    #[error("training diverged at iteration {iter}: loss is not finite")]
    Diverged { iter: usize },

    /// A stage could not proceed on its input (e.g. too few clusters).
    #[error("{stage} failed: {detail}")]
    Stage { stage: &'static str, detail: String },
}

impl CdaError {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CdaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(
        format: &'static str,
        path: impl Into<String>,
        detail: impl Into<String>,
    ) -> Self {
        CdaError::Format {
            format,
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// True when the error indicates bad user input rather than a
    /// computation failure; the CLI maps this to exit code 2.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            CdaError::Io { .. }
                | CdaError::Format { .. }
                | CdaError::Invalid(_)
                | CdaError::DimMismatch(_)
        )
    }
}
