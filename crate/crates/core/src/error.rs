use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor, parameter or batch does not have the shape a layer expects.
    #[error("shape mismatch at layer {layer}: {message}")]
    Shape { layer: String, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A persisted file did not match its declared format.
    #[error("format error in {what}: expected {expected}, found {found}")]
    Format {
        what: String,
        expected: String,
        found: String,
    },

    #[error("training diverged at epoch {epoch}: loss is {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(layer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Shape {
            layer: layer.into(),
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }

    pub(crate) fn format(
        what: impl Into<String>,
        expected: impl Into<String>,
        found: impl Into<String>,
    ) -> Self {
        Error::Format {
            what: what.into(),
            expected: expected.into(),
            found: found.into(),
        }
    }

    /// Maps an unexpected EOF to a structured "truncated" format error.
    pub(crate) fn from_read(what: &str, err: io::Error) -> Self {
        if err.kind() == io::ErrorKind::UnexpectedEof {
            Error::format(what, "more bytes", "truncated file")
        } else {
            Error::Io(err)
        }
    }
}
