//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Language id outside the registry.
    #[error("language {lang} out of range (registry size {num_languages})")]
    LanguageOutOfRange { lang: u16, num_languages: u16 },

    /// Combinatorial guard for enumeration oracles.
    #[error("enumeration guard exceeded: {states} states > limit {limit}")]
    EnumerationGuard { states: u128, limit: u128 },

    /// Policy checkpoint shape differs from what the caller expected.
    #[error("checkpoint shape mismatch: expected V={expected_v} K={expected_k}, got V={actual_v} K={actual_k}")]
    ShapeMismatch { expected_v: u32, expected_k: u16, actual_v: u32, actual_k: u16 },

    /// A trainer produced a non-finite quantity.
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: &'static str, step: usize },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed file contents (checkpoint, dataset, manifest).
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
