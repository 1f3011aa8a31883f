//! Video clips and the operations that produce training data from them:
//! Gaussian degradation, cross-scene fusion, luma conversion, and aligned
//! patch sampling.
//!
//! Frames are H×W×3 arrays of real values in [0,1]; quantization to 8 bits
//! happens only at PNG I/O ([`io`]).

pub mod io;
pub mod synth;

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::DegradationSpec;
use crate::nn::mirror_index;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Hr,
    Lr,
}

/// An ordered run of same-sized frames. `scene_boundary` is the index of
/// the first frame of the second scene and is present exactly when the clip
/// was spliced together from two sources.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Array3<f64>>,
    pub role: Role,
    pub scene_boundary: Option<usize>,
}

impl FrameSequence {
    pub fn new(
        frames: Vec<Array3<f64>>,
        role: Role,
        scene_boundary: Option<usize>,
    ) -> Result<Self> {
        if frames.is_empty() || frames.len() % 2 == 0 {
            return Err(Error::data(format!(
                "clip length {} must be odd and positive (2N+1 frames)",
                frames.len()
            )));
        }
        let dim = frames[0].dim();
        if dim.2 != 3 {
            return Err(Error::shape(format!("frames must be H×W×3, got {dim:?}")));
        }
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::shape(format!(
                    "frame {i} is {:?}, expected {dim:?}",
                    f.dim()
                )));
            }
            if !f.iter().all(|&v| (0.0..=1.0).contains(&v)) {
                return Err(Error::data(format!("frame {i} has values outside [0,1]")));
            }
        }
        if let Some(k) = scene_boundary {
            if k == 0 || k >= frames.len() {
                return Err(Error::data(format!(
                    "scene boundary {k} outside [1, {}]",
                    frames.len() - 1
                )));
            }
        }
        Ok(FrameSequence { frames, role, scene_boundary })
    }

    pub fn t(&self) -> usize {
        self.frames.len()
    }

    pub fn height(&self) -> usize {
        self.frames[0].dim().0
    }

    pub fn width(&self) -> usize {
        self.frames[0].dim().1
    }

    /// Index of the center (reference) frame.
    pub fn reference_index(&self) -> usize {
        self.t() / 2
    }
}

/// Unit-sum 1-D Gaussian taps, centered.
pub fn gaussian_kernel(sigma: f64, taps: usize) -> Vec<f64> {
    let half = (taps / 2) as f64;
    let mut w: Vec<f64> = (0..taps)
        .map(|i| {
            let x = i as f64 - half;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian blur with mirrored borders (edge sample repeated:
/// index -1 maps back to 0).
pub fn gaussian_blur(frame: &Array3<f64>, spec: &DegradationSpec) -> Result<Array3<f64>> {
    spec.validate()?;
    let w = gaussian_kernel(spec.sigma, spec.kernel_size);
    let half = (spec.kernel_size / 2) as isize;
    let (h, wd, c) = frame.dim();
    let mut tmp = Array3::<f64>::zeros((h, wd, c));
    for y in 0..h {
        for x in 0..wd {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    let sx = mirror_index(x as isize + k as isize - half, wd);
                    acc += wk * frame[[y, sx, ch]];
                }
                tmp[[y, x, ch]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((h, wd, c));
    for y in 0..h {
        for x in 0..wd {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &wk) in w.iter().enumerate() {
                    let sy = mirror_index(y as isize + k as isize - half, h);
                    acc += wk * tmp[[sy, x, ch]];
                }
                out[[y, x, ch]] = acc;
            }
        }
    }
    Ok(out)
}

/// Keeps every `scale`-th sample starting at offset 0. Callers blur first;
/// this is pure decimation.
pub fn downsample(frame: &Array3<f64>, scale: usize) -> Result<Array3<f64>> {
    if scale == 0 {
        return Err(Error::config("scale must be >= 1"));
    }
    if scale == 1 {
        return Ok(frame.clone());
    }
    let (h, w, _) = frame.dim();
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::data(format!(
            "{h}×{w} frame not divisible by scale {scale}; crop to {}×{} first",
            h - h % scale,
            w - w % scale
        )));
    }
    Ok(frame.slice(s![..;scale, ..;scale, ..]).to_owned())
}

/// Blur-then-decimate every frame. The scene boundary, if any, carries over.
pub fn make_lr_sequence(hr: &FrameSequence, spec: &DegradationSpec) -> Result<FrameSequence> {
    if hr.role != Role::Hr {
        return Err(Error::data("make_lr_sequence expects an HR clip"));
    }
    let mut frames = Vec::with_capacity(hr.t());
    for f in &hr.frames {
        let blurred = gaussian_blur(f, spec)?;
        frames.push(downsample(&blurred, spec.scale)?);
    }
    // Blur keeps a unit-sum convex combination of in-range values, so the
    // frames stay in [0,1]; construct without re-deriving the boundary.
    FrameSequence::new(frames, Role::Lr, hr.scene_boundary)
}

/// Splices frames [0, k) of `a` onto frames [k, T) of `b`.
pub fn fuse_sequences(a: &FrameSequence, b: &FrameSequence, k: usize) -> Result<FrameSequence> {
    if a.t() != b.t() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::shape(format!(
            "cannot fuse {}×{}×{} with {}×{}×{}",
            a.t(),
            a.height(),
            a.width(),
            b.t(),
            b.height(),
            b.width()
        )));
    }
    if a.role != b.role {
        return Err(Error::data("cannot fuse clips of different roles"));
    }
    if k == 0 || k >= a.t() {
        return Err(Error::data(format!("splice index {k} outside [1, {}]", a.t() - 1)));
    }
    let frames: Vec<Array3<f64>> = a.frames[..k]
        .iter()
        .chain(b.frames[k..].iter())
        .cloned()
        .collect();
    FrameSequence::new(frames, a.role, Some(k))
}

/// ITU-R BT.601 limited-range luma: (65.481 R + 128.553 G + 24.966 B + 16)/255.
pub fn rgb_to_y(frame: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (65.481 * frame[[y, x, 0]] + 128.553 * frame[[y, x, 1]] + 24.966 * frame[[y, x, 2]]
            + 16.0)
            / 255.0
    })
}

/// Choice of fusion partner and splice position for one clip in a pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    pub seed: u64,
    pub partner_index: usize,
    pub splice_index: usize,
}

/// Plans one fusion per clip in a pool of `n` clips of length `t`. Each
/// clip's plan comes from its own RNG stream, so the result is a pure
/// function of (n, t, seed) regardless of evaluation order.
pub fn plan_fusions(n: usize, t: usize, seed: u64) -> Result<Vec<FusionSpec>> {
    if n < 2 {
        return Err(Error::data("fusion needs a pool of at least two clips"));
    }
    if t < 2 {
        return Err(Error::data("fusion needs clips of at least two frames"));
    }
    let mut plans = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut partner = rng.random_range(0..n - 1);
        if partner >= i {
            partner += 1;
        }
        let splice = rng.random_range(1..t);
        plans.push(FusionSpec { seed, partner_index: partner, splice_index: splice });
    }
    Ok(plans)
}

/// Spatially co-located random crops: the same LR offset for every frame,
/// and the HR offset scaled to match.
/// The LR crop origin `sample_patch_pair` draws for a given seed, exposed so
/// callers can crop aligned per-pixel data (flow fields) to the same window.
pub fn sample_patch_origin(lh: usize, lw: usize, lr_size: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.random_range(0..=lh - lr_size);
    let ox = rng.random_range(0..=lw - lr_size);
    (oy, ox)
}

pub fn sample_patch_pair(
    hr: &FrameSequence,
    lr: &FrameSequence,
    lr_size: usize,
    seed: u64,
) -> Result<(FrameSequence, FrameSequence)> {
    if hr.role != Role::Hr || lr.role != Role::Lr {
        return Err(Error::data("sample_patch_pair expects (HR, LR) clips"));
    }
    if hr.t() != lr.t() {
        return Err(Error::shape("HR and LR clips must have the same frame count"));
    }
    let (lh, lw) = (lr.height(), lr.width());
    if lh == 0 || hr.height() % lh != 0 || hr.width() % lw != 0 {
        return Err(Error::shape("HR dims must be an integer multiple of LR dims"));
    }
    let scale = hr.height() / lh;
    if hr.width() / lw != scale {
        return Err(Error::shape("HR/LR scale differs between axes"));
    }
    if lr_size == 0 || lr_size > lh || lr_size > lw {
        return Err(Error::data(format!(
            "crop {lr_size} exceeds LR frame {lh}×{lw}"
        )));
    }
    let (oy, ox) = sample_patch_origin(lh, lw, lr_size, seed);
    let crop = |seq: &FrameSequence, oy: usize, ox: usize, size: usize| -> Vec<Array3<f64>> {
        seq.frames
            .iter()
            .map(|f| f.slice(s![oy..oy + size, ox..ox + size, ..]).to_owned())
            .collect()
    };
    let lr_crop = FrameSequence::new(crop(lr, oy, ox, lr_size), Role::Lr, lr.scene_boundary)?;
    let hr_crop = FrameSequence::new(
        crop(hr, scale * oy, scale * ox, scale * lr_size),
        Role::Hr,
        hr.scene_boundary,
    )?;
    Ok((lr_crop, hr_crop))
}
