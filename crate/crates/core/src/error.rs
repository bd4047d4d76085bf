use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MakoError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite derivative at component {component}")]
    Integration { component: usize },

    #[error("state diverged: component {component} = {value:e}")]
    Divergence { component: usize, value: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, MakoError>;

pub(crate) fn shape_err(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> MakoError {
    MakoError::Shape {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
