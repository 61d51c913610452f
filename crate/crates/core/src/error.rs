use std::path::Path;

use thiserror::Error;

use crate::backend::{BackendError, RenderError};
use crate::claims::ExtractError;
use crate::eval::EvalError;
use crate::utility::UtilityError;

/// Crate-level error for fallible operations that span modules.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Utility(#[from] UtilityError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("invalid input: {0}")]
    Invalid(String),
}

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<ExtractError> for Error {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Render(r) => Error::Render(r),
            ExtractError::Backend(b) => Error::Backend(b),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
