//! Fixed 3-D sinusoidal position encoding over (frame, patch-row,
//! patch-col) positions, plus the optional trainable per-position offset.
//!
//! The d channels split into three groups of d/3, one per axis in the order
//! (frame, row, column). Within a group, channel pair (2k, 2k+1) holds
//! (sin(p·α_k), cos(p·α_k)) with α_k = 1/10000^(2k/(d/3)) and p the patch-grid
//! position along that axis. Adding the encoding to a C-channel token sums
//! the three groups channelwise (d = 3C) and broadcasts over the token's
//! P×P pixels.

use ndarray::{s, Array4, ArrayD};

use crate::features::TokenGrid;
use crate::{Error, Result};

/// The d-channel encoding for every (t, row, col) patch position.
#[derive(Debug, Clone, PartialEq)]
pub struct PEGrid {
    /// (T, rows, cols, d).
    values: Array4<f64>,
}

/// α_k for a d/3-channel axis group.
pub fn pe_alpha(k: usize, group: usize) -> f64 {
    10000f64.powf(-2.0 * k as f64 / group as f64)
}

/// Builds the fixed encoding; a pure function of the geometry.
pub fn sinusoidal_pe(t: usize, rows: usize, cols: usize, d: usize) -> Result<PEGrid> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::config(format!("pe channels {d} must be divisible by 6")));
    }
    if t == 0 || rows == 0 || cols == 0 {
        return Err(Error::shape("pe grid needs positive dimensions"));
    }
    let g = d / 3;
    let mut values = Array4::<f64>::zeros((t, rows, cols, d));
    for ti in 0..t {
        for r in 0..rows {
            for c in 0..cols {
                for (axis, p) in [(0usize, ti), (1, r), (2, c)] {
                    for k in 0..g / 2 {
                        let angle = p as f64 * pe_alpha(k, g);
                        values[[ti, r, c, axis * g + 2 * k]] = angle.sin();
                        values[[ti, r, c, axis * g + 2 * k + 1]] = angle.cos();
                    }
                }
            }
        }
    }
    Ok(PEGrid { values })
}

impl PEGrid {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.values.dim()
    }

    pub fn values(&self) -> &Array4<f64> {
        &self.values
    }

    /// Channelwise sum of the three axis groups: the d/3-channel vector a
    /// token at each position actually receives.
    pub fn collapsed(&self) -> Array4<f64> {
        let (t, rows, cols, d) = self.values.dim();
        let g = d / 3;
        let mut out = Array4::<f64>::zeros((t, rows, cols, g));
        for axis in 0..3 {
            out += &self.values.slice(s![.., .., .., axis * g..(axis + 1) * g]);
        }
        out
    }
}

/// y = x + PE (+ optional trainable bias), broadcast over each token's
/// pixels. The bias, when given, has the collapsed shape (T, rows, cols, C).
pub fn add_pe(tokens: &TokenGrid, pe: &PEGrid, bias: Option<&ArrayD<f64>>) -> Result<TokenGrid> {
    let (t, rows, cols, c, _, _) = tokens.dim();
    let (pt, pr, pc, d) = pe.dims();
    if (t, rows, cols) != (pt, pr, pc) || c != d / 3 {
        return Err(Error::shape(format!(
            "token grid ({t},{rows},{cols},C={c}) does not match pe grid ({pt},{pr},{pc},d={d})"
        )));
    }
    let mut offset = pe.collapsed();
    if let Some(b) = bias {
        if b.shape() != offset.shape() {
            return Err(Error::shape(format!(
                "pe bias shape {:?} expected {:?}",
                b.shape(),
                offset.shape()
            )));
        }
        offset += &b.view().into_dimensionality::<ndarray::Ix4>().expect("bias rank 4");
    }
    let mut out = tokens.clone();
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                for ch in 0..c {
                    let mut px = out.slice_mut(s![ti, r, cl, ch, .., ..]);
                    px += offset[[ti, r, cl, ch]];
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of [`add_pe`]: the token gradient passes through unchanged; the
/// bias gradient is the pixel sum per (t, row, col, channel).
pub fn add_pe_bias_grad(dtokens: &TokenGrid) -> Array4<f64> {
    let (t, rows, cols, c, _, _) = dtokens.dim();
    let mut g = Array4::<f64>::zeros((t, rows, cols, c));
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                for ch in 0..c {
                    g[[ti, r, cl, ch]] =
                        dtokens.slice(s![ti, r, cl, ch, .., ..]).sum();
                }
            }
        }
    }
    g
}
