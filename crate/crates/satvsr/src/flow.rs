//! Optical flow and the patch-label grids built from it.
//!
//! A [`FlowField`] is indexed on the reference frame's pixel grid: content
//! at reference position (x, y) is found in the support frame near
//! (x + dx, y + dy). That is exactly what block matching over reference
//! blocks measures, and it is the direction [`build_labels`] consumes when
//! it marks, for every reference patch, the patch-grid cell in each support
//! frame that holds the same content.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};

use crate::video::FrameSequence;
use crate::{Error, Result};

/// Per-pixel displacement map, shape (H, W, 2) with the last axis holding
/// (dx, dy) in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    data: Array3<f64>,
}

impl FlowField {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (h, w, two) = data.dim();
        if two != 2 || h == 0 || w == 0 {
            return Err(Error::shape(format!("flow field must be H×W×2, got {:?}", data.dim())));
        }
        for row in data.outer_iter() {
            for px in row.outer_iter() {
                let (dx, dy) = (px[0], px[1]);
                if !dx.is_finite() || !dy.is_finite() || dx.abs() >= w as f64 || dy.abs() >= h as f64
                {
                    return Err(Error::data(format!(
                        "flow displacement ({dx}, {dy}) invalid for a {h}×{w} field"
                    )));
                }
            }
        }
        Ok(FlowField { data })
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { data: Array3::zeros((h, w, 2)) }
    }

    pub fn constant(h: usize, w: usize, dx: f64, dy: f64) -> Result<Self> {
        let mut data = Array3::zeros((h, w, 2));
        data.slice_mut(s![.., .., 0]).fill(dx);
        data.slice_mut(s![.., .., 1]).fill(dy);
        FlowField::new(data)
    }

    /// The field restricted to an `h`×`w` window at (oy, ox); re-validated
    /// because the magnitude bound tightens with the smaller dims.
    pub fn crop(&self, oy: usize, ox: usize, h: usize, w: usize) -> Result<Self> {
        if oy + h > self.height() || ox + w > self.width() {
            return Err(Error::shape(format!(
                "crop {h}×{w}@({oy},{ox}) outside a {}×{} flow field",
                self.height(),
                self.width()
            )));
        }
        FlowField::new(self.data.slice(s![oy..oy + h, ox..ox + w, ..]).to_owned())
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn dx(&self, y: usize, x: usize) -> f64 {
        self.data[[y, x, 0]]
    }

    pub fn dy(&self, y: usize, x: usize) -> f64 {
        self.data[[y, x, 1]]
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }
}

/// Integer block-matching flow: for every `block`×`block` tile of
/// `reference`, the displacement within ±`radius` minimizing the sum of
/// absolute differences against `neighbor`. Candidates whose window leaves
/// the frame are skipped; ties resolve to the smallest displacement
/// (zero first), so identical frames always yield zero flow.
pub fn block_matching_flow(
    reference: &Array3<f64>,
    neighbor: &Array3<f64>,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    let (h, w, c) = reference.dim();
    if neighbor.dim() != (h, w, c) {
        return Err(Error::shape("block matching needs frames of identical shape"));
    }
    if block == 0 || h % block != 0 || w % block != 0 {
        return Err(Error::shape(format!(
            "frame {h}×{w} is not divisible into {block}×{block} blocks"
        )));
    }
    let r = radius as isize;
    let mut candidates: Vec<(isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            candidates.push((dy, dx));
        }
    }
    candidates.sort_by_key(|&(dy, dx)| (dy.abs() + dx.abs(), dy, dx));

    let mut data = Array3::<f64>::zeros((h, w, 2));
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let mut best = (0isize, 0isize);
            let mut best_sad = f64::INFINITY;
            for &(dy, dx) in &candidates {
                let ty = by as isize + dy;
                let tx = bx as isize + dx;
                if ty < 0 || tx < 0 || ty + block as isize > h as isize
                    || tx + block as isize > w as isize
                {
                    continue;
                }
                let (ty, tx) = (ty as usize, tx as usize);
                let mut sad = 0.0;
                for y in 0..block {
                    for x in 0..block {
                        for ch in 0..c {
                            sad += (reference[[by + y, bx + x, ch]]
                                - neighbor[[ty + y, tx + x, ch]])
                                .abs();
                        }
                    }
                }
                if sad < best_sad {
                    best_sad = sad;
                    best = (dy, dx);
                }
            }
            for y in by..by + block {
                for x in bx..bx + block {
                    data[[y, x, 0]] = best.1 as f64;
                    data[[y, x, 1]] = best.0 as f64;
                }
            }
        }
    }
    FlowField::new(data)
}

/// Source of per-frame flow fields for a clip.
#[derive(Debug, Clone)]
pub enum FlowProvider {
    /// SAD block matching against the reference frame.
    BlockMatching { block: usize, radius: usize },
    /// Ground-truth fields attached to generated clips, one per frame in
    /// order; the reference frame's own entry is all zeros.
    Known(Vec<FlowField>),
    /// Externally produced flow files, one per frame in order.
    Import(Vec<PathBuf>),
}

impl FlowProvider {
    /// One field per frame, aligning each support frame to the clip's
    /// center reference frame.
    pub fn flows_for_clip(&self, clip: &FrameSequence) -> Result<Vec<FlowField>> {
        let t = clip.t();
        let (h, w) = (clip.height(), clip.width());
        match self {
            FlowProvider::BlockMatching { block, radius } => {
                let reference = &clip.frames[clip.reference_index()];
                clip.frames
                    .iter()
                    .map(|frame| block_matching_flow(reference, frame, *block, *radius))
                    .collect()
            }
            FlowProvider::Known(fields) => {
                if fields.len() != t {
                    return Err(Error::data(format!(
                        "{} stored flow fields for a {t}-frame clip",
                        fields.len()
                    )));
                }
                for f in fields {
                    if (f.height(), f.width()) != (h, w) {
                        return Err(Error::shape("stored flow field size mismatch"));
                    }
                }
                Ok(fields.clone())
            }
            FlowProvider::Import(paths) => {
                if paths.len() != t {
                    return Err(Error::data(format!(
                        "{} flow files for a {t}-frame clip",
                        paths.len()
                    )));
                }
                let mut fields = Vec::with_capacity(t);
                for p in paths {
                    let f = read_flow_file(p)?;
                    if (f.height(), f.width()) != (h, w) {
                        return Err(Error::shape(format!(
                            "flow file {} is {}×{}, clip is {h}×{w}",
                            p.display(),
                            f.height(),
                            f.width()
                        )));
                    }
                    fields.push(f);
                }
                Ok(fields)
            }
        }
    }
}

/// For every (reference patch, frame) pair, the index of the patch-grid
/// cell in that frame holding the reference patch's content.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    /// Shape (num_patches, T); entries index the same patch grid.
    pub labels: Array2<usize>,
    pub rows: usize,
    pub cols: usize,
}

impl LabelGrid {
    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn t(&self) -> usize {
        self.labels.dim().1
    }
}

/// Averages each flow field over every reference patch footprint, moves the
/// patch center by that mean displacement, and snaps to the nearest grid
/// cell (half-cell displacements round away from the current cell). Targets
/// beyond the frame clamp to the nearest valid cell.
pub fn build_labels(flows: &[FlowField], patch: usize, stride: usize) -> Result<LabelGrid> {
    if patch == 0 || stride != patch {
        return Err(Error::config(format!(
            "labels need stride == patch > 0, got patch {patch} stride {stride}"
        )));
    }
    let first = flows
        .first()
        .ok_or_else(|| Error::data("label grid needs at least one flow field"))?;
    let (h, w) = (first.height(), first.width());
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}×{w} frame is not divisible into {patch}×{patch} patches"
        )));
    }
    let rows = h / patch;
    let cols = w / patch;
    let t = flows.len();
    let mut labels = Array2::<usize>::zeros((rows * cols, t));
    for (ti, flow) in flows.iter().enumerate() {
        if (flow.height(), flow.width()) != (h, w) {
            return Err(Error::shape("flow fields for one clip must share a size"));
        }
        for r in 0..rows {
            for c in 0..cols {
                let mut sum_dx = 0.0;
                let mut sum_dy = 0.0;
                for y in r * patch..(r + 1) * patch {
                    for x in c * patch..(c + 1) * patch {
                        sum_dx += flow.dx(y, x);
                        sum_dy += flow.dy(y, x);
                    }
                }
                let n = (patch * patch) as f64;
                let dcol = (sum_dx / n / patch as f64).round() as isize;
                let drow = (sum_dy / n / patch as f64).round() as isize;
                let lc = (c as isize + dcol).clamp(0, cols as isize - 1) as usize;
                let lr = (r as isize + drow).clamp(0, rows as isize - 1) as usize;
                labels[[r * cols + c, ti]] = lr * cols + lc;
            }
        }
    }
    Ok(LabelGrid { labels, rows, cols })
}

const FLOW_MAGIC: &[u8; 4] = b"SVF1";

/// Writes the interchange flow format: magic `SVF1`, height and width as
/// little-endian u32, then row-major (dx, dy) pairs as little-endian f32.
pub fn write_flow_file(path: &Path, flow: &FlowField) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + flow.height() * flow.width() * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&(flow.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(flow.width() as u32).to_le_bytes());
    for y in 0..flow.height() {
        for x in 0..flow.width() {
            buf.extend_from_slice(&(flow.dx(y, x) as f32).to_le_bytes());
            buf.extend_from_slice(&(flow.dy(y, x) as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_flow_file(path: &Path) -> Result<FlowField> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |what: &str| Error::data(format!("flow file {}: {what}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != FLOW_MAGIC {
        return Err(bad("missing SVF1 header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expect = 12 + h * w * 8;
    if bytes.len() != expect {
        return Err(bad(&format!("expected {expect} bytes, found {}", bytes.len())));
    }
    let mut data = Array3::<f64>::zeros((h, w, 2));
    let mut off = 12;
    for y in 0..h {
        for x in 0..w {
            let dx = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            let dy = f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap());
            data[[y, x, 0]] = f64::from(dx);
            data[[y, x, 1]] = f64::from(dy);
            off += 8;
        }
    }
    FlowField::new(data).map_err(|e| bad(&e.to_string()))
}
