//! Scenario-adaptive video super-resolution.
//!
//! The pipeline reconstructs a high-resolution center frame from a window of
//! 2N+1 low-resolution frames. Optical flow marks, for every patch of the
//! reference frame, the corresponding patch in each support frame; attention
//! is computed only between patches that share a label, and the single most
//! similar one supplements the reference patch. A cross-scale stage then
//! matches each patch against average-pooled copies of the feature map and
//! fuses the gated matches before upsampling.
//!
//! Everything is plain `f64` on the CPU with hand-written backward passes,
//! which keeps training bit-reproducible and lets the test suite verify every
//! gradient against central finite differences.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod crossscale;
pub mod features;
pub mod flow;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod posenc;
pub mod train;
pub mod video;

pub use config::{AttentionMode, DegradationSpec, ModelConfig, TrainSpec};
pub use model::SatVsr;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration value (wrong kernel size, indivisible dims, ...).
    #[error("config: {0}")]
    Config(String),
    /// Tensor/sequence geometry mismatch.
    #[error("shape: {0}")]
    Shape(String),
    /// Malformed or missing data (clip directories, flow files, manifests).
    #[error("data: {0}")]
    Data(String),
    /// Training diverged; the loss became non-finite at `iter`.
    #[error("non-finite loss at iteration {iter}")]
    NonFiniteLoss { iter: u64 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
