//! Per-frame feature extraction, Q/K/V projection, and the patch token
//! layout shared by the attention stages.
//!
//! Token geometry is (T, rows, cols, C, P, P): frame, patch-grid cell, then
//! the P×P pixels of that patch per channel. Patch cell (r, c) has the flat
//! index r·cols + c, the same order label grids use.

use ndarray::{s, Array3, Array4, Array6, ArrayView3, Axis};

use crate::config::ModelConfig;
use crate::nn::{relu, relu_backward, Conv2d, GradStore, Init, ParamId, ParamStore};
use crate::video::FrameSequence;
use crate::{Error, Result};

/// (T, C, H, W).
pub type FeatureMap = Array4<f64>;
/// (T, rows, cols, C, P, P).
pub type TokenGrid = Array6<f64>;

fn frame_to_chw(frame: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = frame.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, x)| frame[[y, x, ch]])
}

/// Shared-weight per-frame stack: one 3×3 conv onto C channels followed by
/// `blocks` residual blocks (conv–ReLU–conv plus skip).
pub struct FeatureExtractor {
    input: Conv2d,
    blocks: Vec<(Conv2d, Conv2d)>,
    channels: usize,
}

// Intermediates for one frame, recomputed on the backward pass.
struct FrameTrace {
    x: Array3<f64>,                      // (3, H, W)
    pre: Vec<(Array3<f64>, Array3<f64>)>, // per block: (input f_i, preactivation a_i)
    out: Array3<f64>,
}

impl FeatureExtractor {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        let input = Conv2d::new(ps, "extract.in", 3, c, 3, Init::FanIn(3 * 9));
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let c1 =
                    Conv2d::new(ps, &format!("extract.block{i}.c1"), c, c, 3, Init::FanIn(c * 9));
                let c2 =
                    Conv2d::new(ps, &format!("extract.block{i}.c2"), c, c, 3, Init::FanIn(c * 9));
                (c1, c2)
            })
            .collect();
        FeatureExtractor { input, blocks, channels: c }
    }

    fn trace_frame(&self, ps: &ParamStore, frame: &Array3<f64>) -> FrameTrace {
        let x = frame_to_chw(frame);
        let mut f = self.input.forward(ps, x.view());
        let mut pre = Vec::with_capacity(self.blocks.len());
        for (c1, c2) in &self.blocks {
            let a = c1.forward(ps, f.view());
            let r = relu(&a);
            let next = c2.forward(ps, r.view()) + &f;
            pre.push((f, a));
            f = next;
        }
        FrameTrace { x, pre, out: f }
    }

    /// (T, C, H, W) features for every frame, same weights per frame.
    pub fn forward(&self, ps: &ParamStore, clip: &FrameSequence) -> FeatureMap {
        let (t, h, w) = (clip.t(), clip.height(), clip.width());
        let mut out = Array4::zeros((t, self.channels, h, w));
        for (i, frame) in clip.frames.iter().enumerate() {
            let trace = self.trace_frame(ps, frame);
            out.index_axis_mut(Axis(0), i).assign(&trace.out);
        }
        out
    }

    /// Accumulates parameter gradients for dL/dfeatures; the input is data,
    /// so no gradient is returned.
    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        clip: &FrameSequence,
        dfeat: &FeatureMap,
    ) {
        for (i, frame) in clip.frames.iter().enumerate() {
            let trace = self.trace_frame(ps, frame);
            let mut df = dfeat.index_axis(Axis(0), i).to_owned();
            for ((c1, c2), (f_in, a)) in self.blocks.iter().zip(trace.pre.iter()).rev() {
                let r = relu(a);
                let dr = c2.backward(ps, gs, r.view(), df.view());
                let da = relu_backward(a, &dr);
                let dthrough = c1.backward(ps, gs, f_in.view(), da.view());
                df = dthrough + &df; // skip connection
            }
            self.input.backward(ps, gs, trace.x.view(), df.view());
        }
    }
}

/// Three independent 3×3 stride-1 projections.
pub struct QkvProjector {
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
}

impl QkvProjector {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        QkvProjector {
            q: Conv2d::new(ps, "proj.q", c, c, 3, Init::FanIn(c * 9)),
            k: Conv2d::new(ps, "proj.k", c, c, 3, Init::FanIn(c * 9)),
            v: Conv2d::new(ps, "proj.v", c, c, 3, Init::FanIn(c * 9)),
        }
    }

    pub fn forward(&self, ps: &ParamStore, f: &FeatureMap) -> (FeatureMap, FeatureMap, FeatureMap) {
        let apply = |conv: &Conv2d| {
            let (t, _, h, w) = f.dim();
            let mut out = Array4::zeros((t, conv.out_ch, h, w));
            for i in 0..t {
                out.index_axis_mut(Axis(0), i)
                    .assign(&conv.forward(ps, f.index_axis(Axis(0), i)));
            }
            out
        };
        (apply(&self.q), apply(&self.k), apply(&self.v))
    }

    /// dL/dF from the three projection gradients.
    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        f: &FeatureMap,
        dq: &FeatureMap,
        dk: &FeatureMap,
        dv: &FeatureMap,
    ) -> FeatureMap {
        let mut df = Array4::zeros(f.raw_dim());
        for (conv, dmap) in [(&self.q, dq), (&self.k, dk), (&self.v, dv)] {
            for i in 0..f.dim().0 {
                let dx = conv.backward(ps, gs, f.index_axis(Axis(0), i), dmap.index_axis(Axis(0), i));
                let mut slot = df.index_axis_mut(Axis(0), i);
                slot += &dx;
            }
        }
        df
    }
}

/// Cuts (T, C, H, W) into non-overlapping P×P patch tokens.
pub fn split_patches(f: &FeatureMap, patch: usize, stride: usize) -> Result<TokenGrid> {
    if patch == 0 || stride != patch {
        return Err(Error::config(format!(
            "token split needs stride == patch > 0, got patch {patch} stride {stride}"
        )));
    }
    let (t, c, h, w) = f.dim();
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} features are not divisible into {patch}×{patch} patches"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let mut tokens = Array6::zeros((t, rows, cols, c, patch, patch));
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                let src = f.slice(s![
                    ti,
                    ..,
                    r * patch..(r + 1) * patch,
                    cl * patch..(cl + 1) * patch
                ]);
                tokens.slice_mut(s![ti, r, cl, .., .., ..]).assign(&src);
            }
        }
    }
    Ok(tokens)
}

/// Exact inverse of [`split_patches`] (and, being a permutation, also its
/// gradient adjoint).
pub fn merge_patches(tokens: &TokenGrid) -> FeatureMap {
    let (t, rows, cols, c, p, _) = tokens.dim();
    let mut f = Array4::zeros((t, c, rows * p, cols * p));
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                let src = tokens.slice(s![ti, r, cl, .., .., ..]);
                f.slice_mut(s![ti, .., r * p..(r + 1) * p, cl * p..(cl + 1) * p])
                    .assign(&src);
            }
        }
    }
    f
}

/// One token as a (C, P, P) view.
pub fn token_view(tokens: &TokenGrid, t: usize, r: usize, c: usize) -> ArrayView3<'_, f64> {
    tokens.slice(s![t, r, c, .., .., ..])
}

/// Lists a parameter id for every tensor in the module group `prefix.`
/// (used by tests to count and perturb weights).
pub fn params_with_prefix(ps: &ParamStore, prefix: &str) -> Vec<ParamId> {
    ps.entries()
        .filter(|(name, _)| name.starts_with(prefix))
        .filter_map(|(name, _)| ps.id(name))
        .collect()
}
