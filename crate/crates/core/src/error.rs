use std::path::PathBuf;

/// Errors produced by the splatting engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("parse error in {file} at {location}: {message}")]
    Parse {
        file: String,
        /// `line N` for text inputs, `byte N` for binary inputs.
        location: String,
        message: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("transport error after {retries} retries: {message}")]
    Transport { message: String, retries: u32 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("training diverged at iteration {iteration} (view {view}): {message}")]
    Divergence {
        iteration: u64,
        view: String,
        message: String,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse_line(file: &str, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.to_string(),
            location: format!("line {line}"),
            message: message.into(),
        }
    }

    pub(crate) fn parse_byte(file: &str, offset: u64, message: impl Into<String>) -> Self {
        Error::Parse {
            file: file.to_string(),
            location: format!("byte {offset}"),
            message: message.into(),
        }
    }
}
