use thiserror::Error;

/// Errors raised by tensor kernels, network construction and the harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Invalid configuration: channel mismatch, bad spec, wrong dims.
    #[error("configuration error: {0}")]
    Config(String),
    /// Two tensors that must agree in shape do not.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;
