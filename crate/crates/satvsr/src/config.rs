//! Architectural and training hyperparameters with their defaults.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Which attention path the encoder runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Flow-labeled top-1 attention (the scenario-adaptive path).
    Sat,
    /// Plain scaled-dot-product attention over every patch in space and time
    /// (the ablation baseline).
    Global,
}

impl std::str::FromStr for AttentionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sat" => Ok(AttentionMode::Sat),
            "global" => Ok(AttentionMode::Global),
            other => Err(Error::config(format!("unknown attention mode `{other}`"))),
        }
    }
}

/// Model hyperparameters.
///
/// `pe_channels` must equal `3 * channels`: the positional grid carries one
/// channel group per axis (frame, row, column) and each group is added onto
/// the feature channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Temporal radius; a clip holds `2 * n_radius + 1` frames.
    pub n_radius: usize,
    /// Feature channels.
    pub channels: usize,
    /// Residual blocks in the feature extractor.
    pub blocks: usize,
    /// Patch side length.
    pub patch: usize,
    /// Patch stride; only `stride == patch` (non-overlapping) is supported.
    pub stride: usize,
    /// Positional-encoding channels, `3 * channels`, divisible by 6.
    pub pe_channels: usize,
    /// Upsampling factor; the reconstruction head is built for 4.
    pub scale: usize,
    pub attention_mode: AttentionMode,
    pub csna_enabled: bool,
    /// How many pooled pyramid levels the cross-scale search covers (1–3).
    pub pyramid_levels: usize,
    /// Adds a trainable zero-initialized per-position bias on top of the
    /// fixed sinusoidal encoding.
    pub learnable_pe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_radius: 3,
            channels: 64,
            blocks: 5,
            patch: 8,
            stride: 8,
            pe_channels: 192,
            scale: 4,
            attention_mode: AttentionMode::Sat,
            csna_enabled: true,
            pyramid_levels: 3,
            learnable_pe: false,
        }
    }
}

impl ModelConfig {
    /// Frames per clip.
    pub fn frames(&self) -> usize {
        2 * self.n_radius + 1
    }

    /// Index of the reference (center) frame.
    pub fn reference_index(&self) -> usize {
        self.n_radius
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.patch == 0 {
            return Err(Error::config("channels, blocks and patch must be positive"));
        }
        if self.stride != self.patch {
            return Err(Error::config(format!(
                "stride {} != patch {}; only non-overlapping patches are supported",
                self.stride, self.patch
            )));
        }
        if self.pe_channels % 6 != 0 {
            return Err(Error::config(format!(
                "pe_channels {} must be divisible by 6",
                self.pe_channels
            )));
        }
        if self.pe_channels != 3 * self.channels {
            return Err(Error::config(format!(
                "pe_channels {} must equal 3 * channels = {}",
                self.pe_channels,
                3 * self.channels
            )));
        }
        if self.scale != 4 {
            return Err(Error::config(format!(
                "scale {} unsupported; the reconstruction head upsamples by 4",
                self.scale
            )));
        }
        if self.pyramid_levels == 0 || self.pyramid_levels > 3 {
            return Err(Error::config(format!(
                "pyramid_levels {} outside the supported range 1–3",
                self.pyramid_levels
            )));
        }
        Ok(())
    }

    /// Config for the small double-precision gradient-check model used by the
    /// verification suite.
    pub fn tiny() -> Self {
        ModelConfig {
            n_radius: 1,
            channels: 4,
            blocks: 1,
            patch: 4,
            stride: 4,
            pe_channels: 12,
            ..ModelConfig::default()
        }
    }
}

/// Gaussian-blur-then-decimate degradation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    /// Blur standard deviation in pixels.
    pub sigma: f64,
    /// Integer decimation factor.
    pub scale: usize,
    /// Odd number of taps. 13 covers ±3.75σ at σ = 1.6.
    pub kernel_size: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec { sigma: 1.6, scale: 4, kernel_size: 13 }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma {} must be positive", self.sigma)));
        }
        if self.scale == 0 {
            return Err(Error::config("scale must be >= 1"));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::config(format!(
                "kernel_size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }
}

/// Optimization schedule and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub lr_max: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// One cosine cycle spans this many iterations. 5000 is the desk-scale
    /// default; production runs use 400_000.
    pub total_iters: u64,
    pub eps_charbonnier: f64,
    /// Low-resolution side length of training crops.
    pub lr_patch_size: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainSpec {
    fn default() -> Self {
        TrainSpec {
            lr_max: 2e-4,
            lr_min: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            batch_size: 2,
            total_iters: 5000,
            eps_charbonnier: 1e-3,
            lr_patch_size: 64,
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min < self.lr_max) {
            return Err(Error::config(format!(
                "lr_min {} must be below lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.total_iters < 1 {
            return Err(Error::config("total_iters must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.eps_charbonnier > 0.0) {
            return Err(Error::config("eps_charbonnier must be positive"));
        }
        Ok(())
    }
}

/// Short hex digest of a serializable config, recorded in reports and
/// checkpoints so results can be traced back to their settings.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut out = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}
