//! Synthetic clips with exactly known motion.
//!
//! A textured canvas is sampled through a camera window that slides at a
//! constant per-clip velocity, always a whole number of LR pixels per frame
//! (i.e. a multiple of `scale` HR pixels). Every frame is therefore an exact
//! integer translation of the reference away from the borders, and the true
//! LR flow aligning frame t to the reference is the constant (r − t)·v.

use std::f64::consts::TAU;

use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::DegradationSpec;
use crate::flow::FlowField;
use crate::video::{fuse_sequences, make_lr_sequence, plan_fusions, FrameSequence, Role};
use crate::{Error, Result};

/// Geometry and motion ranges for generated clips (HR units except speeds).
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub scale: usize,
    /// Camera speed per axis in LR pixels per frame, at most this.
    pub max_speed: i64,
    /// The faster axis moves at least this fast, so motion labels carry
    /// signal in every clip.
    pub min_speed: i64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { height: 64, width: 64, frames: 7, scale: 4, max_speed: 3, min_speed: 2 }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.frames % 2 == 0 || self.frames == 0 {
            return Err(Error::config("synthetic clips need an odd frame count"));
        }
        if self.scale == 0 || self.height % self.scale != 0 || self.width % self.scale != 0 {
            return Err(Error::config("synthetic clip dims must be multiples of scale"));
        }
        if self.min_speed > self.max_speed || self.max_speed < 0 {
            return Err(Error::config("need 0 <= min_speed <= max_speed"));
        }
        // The true flow magnitude reaches (frames/2)·max_speed LR pixels and
        // must stay below the LR frame size to be a representable field.
        let reach = (self.frames as i64 / 2) * self.max_speed;
        let lr_min = (self.height.min(self.width) / self.scale) as i64;
        if reach >= lr_min {
            return Err(Error::config(format!(
                "max_speed {} over {} frames overshoots a {}px LR frame",
                self.max_speed, self.frames, lr_min
            )));
        }
        Ok(())
    }
}

/// A generated clip with its degraded version and ground-truth flows.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub hr: FrameSequence,
    pub lr: FrameSequence,
    /// One LR flow field per frame, aligning that frame to the reference;
    /// zero across scene boundaries where no correspondence exists.
    pub flows: Vec<FlowField>,
}

/// Where a fused clip came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusedProvenance {
    pub source_a: usize,
    pub source_b: usize,
    pub splice_index: usize,
    pub seed: u64,
}

// One splitmix64 step; decorrelates per-clip seeds derived from a set seed.
fn mix_seed(seed: u64, k: u64) -> u64 {
    let mut z = seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Sinusoidal plaid plus soft blobs: smooth enough to survive the blur,
// locally distinctive enough that patches are tellable apart.
fn textured_canvas(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut canvas = Array3::from_elem((h, w, 3), 0.5);
    for _ in 0..4 {
        let fy = rng.random_range(-0.06..0.06);
        let fx = rng.random_range(-0.06..0.06);
        let phase = rng.random_range(0.0..TAU);
        let amp = [
            rng.random_range(-0.12..0.12),
            rng.random_range(-0.12..0.12),
            rng.random_range(-0.12..0.12),
        ];
        for y in 0..h {
            for x in 0..w {
                let v = (TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                for c in 0..3 {
                    canvas[[y, x, c]] += amp[c] * v;
                }
            }
        }
    }
    for _ in 0..10 {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let sigma = rng.random_range(3.0..10.0);
        let amp = [
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
        ];
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    canvas[[y, x, c]] += amp[c] * g;
                }
            }
        }
    }
    canvas.mapv_inplace(|v| v.clamp(0.02, 0.98));
    canvas
}

/// A single-scene HR clip and its LR camera velocity per frame.
pub struct SynthScene {
    pub hr: FrameSequence,
    pub velocity_lr: (i64, i64),
}

pub fn synth_scene(spec: &SynthSpec, seed: u64) -> Result<SynthScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vx, vy) = loop {
        let vx = rng.random_range(-spec.max_speed..=spec.max_speed);
        let vy = rng.random_range(-spec.max_speed..=spec.max_speed);
        if vx.abs().max(vy.abs()) >= spec.min_speed {
            break (vx, vy);
        }
    };
    let margin = (spec.frames as i64 - 1) * spec.max_speed * spec.scale as i64;
    let (ch, cw) = (spec.height + 2 * margin as usize, spec.width + 2 * margin as usize);
    let canvas = textured_canvas(ch, cw, &mut rng);
    let mut frames = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames as i64 {
        let oy = (margin + i * vy * spec.scale as i64) as usize;
        let ox = (margin + i * vx * spec.scale as i64) as usize;
        frames.push(
            canvas
                .slice(s![oy..oy + spec.height, ox..ox + spec.width, ..])
                .to_owned(),
        );
    }
    Ok(SynthScene { hr: FrameSequence::new(frames, Role::Hr, None)?, velocity_lr: (vx, vy) })
}

// Constant flow (r − t)·v over an LR frame.
fn scene_flow(lr_h: usize, lr_w: usize, v: (i64, i64), r: usize, t: usize) -> Result<FlowField> {
    let steps = r as i64 - t as i64;
    FlowField::constant(lr_h, lr_w, (steps * v.0) as f64, (steps * v.1) as f64)
}

/// One single-scene clip with its degradation and exact flows.
pub fn make_synth_clip(spec: &SynthSpec, deg: &DegradationSpec, seed: u64) -> Result<LabeledClip> {
    let scene = synth_scene(spec, seed)?;
    let lr = make_lr_sequence(&scene.hr, deg)?;
    let r = scene.hr.reference_index();
    let flows = (0..spec.frames)
        .map(|t| scene_flow(lr.height(), lr.width(), scene.velocity_lr, r, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledClip { hr: scene.hr, lr, flows })
}

pub fn make_synth_set(
    count: usize,
    spec: &SynthSpec,
    deg: &DegradationSpec,
    seed: u64,
) -> Result<Vec<LabeledClip>> {
    (0..count)
        .map(|i| make_synth_clip(spec, deg, mix_seed(seed, i as u64)))
        .collect()
}

/// A pool of scenes spliced pairwise into two-scene clips, with flows that
/// are exact within each scene and zero across the boundary.
pub fn make_fused_set(
    count: usize,
    spec: &SynthSpec,
    deg: &DegradationSpec,
    seed: u64,
) -> Result<Vec<(LabeledClip, FusedProvenance)>> {
    let scenes: Vec<SynthScene> = (0..count)
        .map(|i| synth_scene(spec, mix_seed(seed, i as u64)))
        .collect::<Result<_>>()?;
    let plans = plan_fusions(count, spec.frames, seed)?;
    let r = spec.frames / 2;
    let mut out = Vec::with_capacity(count);
    for (i, plan) in plans.iter().enumerate() {
        let a = &scenes[i];
        let b = &scenes[plan.partner_index];
        let k = plan.splice_index;
        let hr = fuse_sequences(&a.hr, &b.hr, k)?;
        let lr = make_lr_sequence(&hr, deg)?;
        // The reference frame sits in scene A iff r < k; support frames on
        // the other side of the splice get zero flow (no correspondence).
        let ref_velocity = if r < k { a.velocity_lr } else { b.velocity_lr };
        let flows = (0..spec.frames)
            .map(|t| {
                if (t < k) == (r < k) {
                    scene_flow(lr.height(), lr.width(), ref_velocity, r, t)
                } else {
                    Ok(FlowField::zeros(lr.height(), lr.width()))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        out.push((
            LabeledClip { hr, lr, flows },
            FusedProvenance {
                source_a: i,
                source_b: plan.partner_index,
                splice_index: k,
                seed,
            },
        ));
    }
    Ok(out)
}
