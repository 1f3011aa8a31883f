//! Flat `key = value` run configuration. Every tunable lives under one flat
//! namespace with a documented default; command-line flags override file
//! values, file values override defaults.

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use satvsr::video::synth::SynthSpec;
use satvsr::{AttentionMode, DegradationSpec, ModelConfig, TrainSpec};

/// Key list with one-line docs; `get`/`set` below must cover exactly these.
const KEYS: &[(&str, &str)] = &[
    ("n_radius", "temporal radius; a clip holds 2*n_radius+1 frames"),
    ("channels", "feature channels"),
    ("blocks", "residual blocks in the feature extractor"),
    ("patch", "patch side length"),
    ("stride", "patch stride; must equal patch"),
    ("pe_channels", "positional-encoding channels, 3*channels, divisible by 6"),
    ("scale", "upsampling factor; the reconstruction head is built for 4"),
    ("attention_mode", "`sat` (flow-labeled) or `global`"),
    ("csna_enabled", "cross-scale aggregation on/off"),
    ("pyramid_levels", "pooled pyramid levels the cross-scale search covers (1-3)"),
    ("learnable_pe", "adds a trainable bias on top of the sinusoidal encoding"),
    ("lr_max", "cosine learning-rate schedule start"),
    ("lr_min", "cosine learning-rate schedule end"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("batch_size", "training crops per iteration"),
    ("total_iters", "iterations in one cosine cycle"),
    ("eps_charbonnier", "Charbonnier loss knee"),
    ("lr_patch_size", "low-resolution side length of training crops"),
    ("seed", "master seed for weights, sampling, and dataset synthesis"),
    ("checkpoint_every", "checkpoint cadence in iterations; 0 writes only the final one"),
    ("sigma", "degradation blur standard deviation in pixels"),
    ("kernel_size", "degradation blur taps; odd"),
    ("synth_height", "synthetic clip HR height"),
    ("synth_width", "synthetic clip HR width"),
    ("max_speed", "synthetic camera speed cap, LR pixels per frame"),
    ("min_speed", "synthetic camera speed floor on the faster axis"),
];

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainSpec,
    pub sigma: f64,
    pub kernel_size: usize,
    pub synth_height: usize,
    pub synth_width: usize,
    pub max_speed: i64,
    pub min_speed: i64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let deg = DegradationSpec::default();
        let synth = SynthSpec::default();
        RunConfig {
            model: ModelConfig::default(),
            train: TrainSpec::default(),
            sigma: deg.sigma,
            kernel_size: deg.kernel_size,
            synth_height: synth.height,
            synth_width: synth.width,
            max_speed: synth.max_speed,
            min_speed: synth.min_speed,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| anyhow!("key {key}: cannot parse `{value}`: {e}"))
}

impl RunConfig {
    /// Defaults, overlaid with `key = value` lines from `path` if given.
    /// `#` starts a comment; unknown keys are rejected.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let Some(path) = path else { return Ok(cfg) };
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", path.display(), i + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_radius" => self.model.n_radius = parse(key, value)?,
            "channels" => self.model.channels = parse(key, value)?,
            "blocks" => self.model.blocks = parse(key, value)?,
            "patch" => self.model.patch = parse(key, value)?,
            "stride" => self.model.stride = parse(key, value)?,
            "pe_channels" => self.model.pe_channels = parse(key, value)?,
            "scale" => self.model.scale = parse(key, value)?,
            "attention_mode" => {
                self.model.attention_mode = match value {
                    "sat" => AttentionMode::Sat,
                    "global" => AttentionMode::Global,
                    _ => bail!("key attention_mode: expected `sat` or `global`, got `{value}`"),
                }
            }
            "csna_enabled" => self.model.csna_enabled = parse(key, value)?,
            "pyramid_levels" => self.model.pyramid_levels = parse(key, value)?,
            "learnable_pe" => self.model.learnable_pe = parse(key, value)?,
            "lr_max" => self.train.lr_max = parse(key, value)?,
            "lr_min" => self.train.lr_min = parse(key, value)?,
            "beta1" => self.train.beta1 = parse(key, value)?,
            "beta2" => self.train.beta2 = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "total_iters" => self.train.total_iters = parse(key, value)?,
            "eps_charbonnier" => self.train.eps_charbonnier = parse(key, value)?,
            "lr_patch_size" => self.train.lr_patch_size = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "checkpoint_every" => self.train.checkpoint_every = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "synth_height" => self.synth_height = parse(key, value)?,
            "synth_width" => self.synth_width = parse(key, value)?,
            "max_speed" => self.max_speed = parse(key, value)?,
            "min_speed" => self.min_speed = parse(key, value)?,
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> String {
        match key {
            "n_radius" => self.model.n_radius.to_string(),
            "channels" => self.model.channels.to_string(),
            "blocks" => self.model.blocks.to_string(),
            "patch" => self.model.patch.to_string(),
            "stride" => self.model.stride.to_string(),
            "pe_channels" => self.model.pe_channels.to_string(),
            "scale" => self.model.scale.to_string(),
            "attention_mode" => match self.model.attention_mode {
                AttentionMode::Sat => "sat".into(),
                AttentionMode::Global => "global".into(),
            },
            "csna_enabled" => self.model.csna_enabled.to_string(),
            "pyramid_levels" => self.model.pyramid_levels.to_string(),
            "learnable_pe" => self.model.learnable_pe.to_string(),
            "lr_max" => self.train.lr_max.to_string(),
            "lr_min" => self.train.lr_min.to_string(),
            "beta1" => self.train.beta1.to_string(),
            "beta2" => self.train.beta2.to_string(),
            "batch_size" => self.train.batch_size.to_string(),
            "total_iters" => self.train.total_iters.to_string(),
            "eps_charbonnier" => self.train.eps_charbonnier.to_string(),
            "lr_patch_size" => self.train.lr_patch_size.to_string(),
            "seed" => self.train.seed.to_string(),
            "checkpoint_every" => self.train.checkpoint_every.to_string(),
            "sigma" => self.sigma.to_string(),
            "kernel_size" => self.kernel_size.to_string(),
            "synth_height" => self.synth_height.to_string(),
            "synth_width" => self.synth_width.to_string(),
            "max_speed" => self.max_speed.to_string(),
            "min_speed" => self.min_speed.to_string(),
            _ => unreachable!("get called with a key missing from KEYS"),
        }
    }

    pub fn degradation(&self) -> DegradationSpec {
        DegradationSpec {
            sigma: self.sigma,
            scale: self.model.scale,
            kernel_size: self.kernel_size,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            height: self.synth_height,
            width: self.synth_width,
            frames: self.model.frames(),
            scale: self.model.scale,
            max_speed: self.max_speed,
            min_speed: self.min_speed,
        }
    }
}

/// The `--help` appendix: every config key with its default.
pub fn keys_help() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("Config keys (key = default):\n");
    for (key, doc) in KEYS {
        out.push_str(&format!("  {:<16} = {:<8} {doc}\n", key, defaults.get(key)));
    }
    out.push_str("\nPrecedence: defaults < --config file < flags.");
    out
}
