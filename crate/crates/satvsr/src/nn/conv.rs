//! Convolution and linear layers.
//!
//! `Conv2d` is stride-1 with zero padding, implemented as im2col plus one
//! GEMM per frame. Backward recomputes the column matrix from the saved
//! input rather than holding it across the forward pass.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::params::{GradStore, Init, ParamId, ParamStore};

/// Unfolds `x` (C, H, W) into a (C*k*k, H*W) matrix for a stride-1, zero
/// padded convolution producing an H×W output.
pub(crate) fn im2col(x: ArrayView3<f64>, k: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k * k, h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                // Valid output columns for this tap: xp + kx - pad in [0, w).
                let xp_lo = pad.saturating_sub(kx);
                let xp_hi = (w + pad).saturating_sub(kx).min(w);
                if xp_lo >= xp_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src =
                        x.slice(s![ci, iy as usize, (xp_lo + kx - pad)..(xp_hi + kx - pad)]);
                    let mut dst = cols.slice_mut(s![row, (y * w + xp_lo)..(y * w + xp_hi)]);
                    dst.assign(&src);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds a column-matrix gradient back onto the input.
pub(crate) fn col2im(cols: ArrayView2<f64>, c: usize, h: usize, w: usize, k: usize, pad: usize) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let xp_lo = pad.saturating_sub(kx);
                let xp_hi = (w + pad).saturating_sub(kx).min(w);
                if xp_lo >= xp_hi {
                    continue;
                }
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = cols.slice(s![row, (y * w + xp_lo)..(y * w + xp_hi)]);
                    let mut dst =
                        dx.slice_mut(s![ci, iy as usize, (xp_lo + kx - pad)..(xp_hi + kx - pad)]);
                    dst.zip_mut_with(&src, |d, s| *d += s);
                }
            }
        }
    }
    dx
}

/// Stride-1 square convolution with zero padding chosen so the output keeps
/// the input's spatial size.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub ksize: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Registers `<name>.weight` (out, in, k, k) and `<name>.bias` (out).
    /// `init` governs the weight; the bias always starts at zero.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        ksize: usize,
        init: Init,
    ) -> Self {
        assert!(ksize % 2 == 1, "conv `{name}`: kernel size must be odd");
        let weight =
            ps.register(&format!("{name}.weight"), &[out_ch, in_ch, ksize, ksize], init);
        let bias = ps.register(&format!("{name}.bias"), &[out_ch], Init::Zeros);
        Conv2d { weight, bias, in_ch, out_ch, ksize, pad: ksize / 2 }
    }

    pub fn forward(&self, ps: &ParamStore, x: ArrayView3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let cols = im2col(x, self.ksize, self.pad);
        let wmat = ps
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.ksize * self.ksize))
            .unwrap();
        let mut y = wmat.dot(&cols);
        let bias = ps.get(self.bias);
        for (mut row, b) in y.axis_iter_mut(Axis(0)).zip(bias.iter()) {
            row += *b;
        }
        y.into_shape_with_order((self.out_ch, h, w)).unwrap()
    }

    /// Accumulates weight/bias gradients into `gs` and returns dL/dx.
    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        x: ArrayView3<f64>,
        dy: ArrayView3<f64>,
    ) -> Array3<f64> {
        let (c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        assert_eq!(dy.dim(), (self.out_ch, h, w), "conv output gradient shape");
        let dy_std = dy.as_standard_layout();
        let dy_mat = dy_std
            .view()
            .into_shape_with_order((self.out_ch, h * w))
            .unwrap();
        let cols = im2col(x, self.ksize, self.pad);

        let dw = dy_mat.dot(&cols.t());
        gs.add(self.weight, &dw.into_dyn());
        let db = dy_mat.sum_axis(Axis(1));
        gs.add(self.bias, &db.into_dyn());

        let wmat = ps
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_ch, self.in_ch * self.ksize * self.ksize))
            .unwrap();
        let dcols = wmat.t().dot(&dy_mat);
        col2im(dcols.view(), self.in_ch, h, w, self.ksize, self.pad)
    }
}

/// Fully connected layer on row-major batches: (n, in) -> (n, out).
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_f: usize, out_f: usize) -> Self {
        let weight = ps.register(&format!("{name}.weight"), &[out_f, in_f], Init::FanIn(in_f));
        let bias = ps.register(&format!("{name}.bias"), &[out_f], Init::Zeros);
        Linear { weight, bias, in_f, out_f }
    }

    pub fn forward(&self, ps: &ParamStore, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.ncols(), self.in_f, "linear input width");
        let wmat = ps
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_f, self.in_f))
            .unwrap();
        let bias = ps.get(self.bias);
        let mut y = x.dot(&wmat.t());
        for (mut row, _) in y.axis_iter_mut(Axis(0)).zip(0..) {
            for (v, b) in row.iter_mut().zip(bias.iter()) {
                *v += *b;
            }
        }
        y
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        assert_eq!(dy.dim(), (x.nrows(), self.out_f), "linear output gradient shape");
        let dw = dy.t().dot(&x);
        gs.add(self.weight, &dw.into_dyn());
        let db: Array1<f64> = dy.sum_axis(Axis(0));
        gs.add(self.bias, &db.into_dyn());
        let wmat = ps
            .get(self.weight)
            .view()
            .into_shape_with_order((self.out_f, self.in_f))
            .unwrap();
        dy.dot(&wmat)
    }
}
