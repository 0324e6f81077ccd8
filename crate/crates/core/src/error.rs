use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{location}: parse error: {message}")]
    Parse { location: String, message: String },

    #[error("{location}: {message}")]
    Invalid { location: String, message: String },

    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value at {location}")]
    NonFinite { location: String },

    #[error("empty batch: {0}")]
    EmptyBatch(&'static str),

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("unknown material {0:?}")]
    UnknownMaterial(String),

    #[error("forward cache is stale (cached for model version {cached}, model is at {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("training diverged at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("no answered triplet could be instantiated after {retries} batch draws")]
    NoAnsweredTriplets { retries: usize },
}

impl Error {
    pub(crate) fn invalid(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            location: location.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io { .. } | Error::Divergence { .. } | Error::StaleCache { .. }
        )
    }
}

pub(crate) fn check_finite(values: &[f64], location: impl Fn(usize) -> String) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite { location: location(i) }),
        None => Ok(()),
    }
}
