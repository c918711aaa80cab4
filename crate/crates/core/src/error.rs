use alloc::string::String;

/// Errors produced by the denoising core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite values encountered: {0}")]
    NonFinite(String),
    #[error("blind-spot violation: {0}")]
    BlindSpotViolation(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("flow estimator: {0}")]
    Flow(String),
}

pub type Result<T> = core::result::Result<T, Error>;
