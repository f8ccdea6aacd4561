use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed input file. `location` is `path:line` or `path:field`.
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Data violates a model invariant (self-loop, degenerate box, ...).
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("cannot perturb: {0}")]
    CannotPerturb(String),

    #[error("image {image_id}: {source}")]
    Image {
        image_id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("missing predictions for {} image(s): {}", .0.len(), .0.join(", "))]
    MissingPredictions(Vec<String>),

    #[error("scorer failed after {attempts} attempt(s): {message}")]
    Scorer { attempts: usize, message: String },
}

impl Error {
    pub(crate) fn parse(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
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

    pub(crate) fn for_image(self, image_id: &str) -> Self {
        Error::Image {
            image_id: image_id.to_owned(),
            source: Box::new(self),
        }
    }

    /// True for failures caused by the runtime environment (files, network)
    /// rather than by invalid input.
    pub fn is_environmental(&self) -> bool {
        match self {
            Error::Io { .. } | Error::Scorer { .. } => true,
            Error::Image { source, .. } => source.is_environmental(),
            _ => false,
        }
    }
}
