//! Guide-mask segmentation on a self-checking tensor substrate.
//!
//! A frozen patch-token encoder produces token features; a learnable
//! [`TokenBook`](tokenbook::TokenBook) turns token-prototype similarities into
//! a spatial guide mask; the guide gates encoder stages of a small UNet; the
//! whole pipeline trains against a composite Dice/BCE/guide objective with
//! AdamW, optionally adapting the frozen encoder through low-rank (LoRA)
//! updates. Every differentiable operation is verified against a central
//! finite-difference oracle.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod tokenbook;
pub mod train;

pub use tensor::{Precision, Scalar, Tensor};

/// Version string stamped into manifests and checkpoints.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration or shape mismatch; names the offending dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file content; carries the byte offset where parsing failed.
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Invalid runtime input (wrong resolution, missing component, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Numerical failure: divergence, non-finite values, failed gradient check.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }

    fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
