//! Pointwise and resampling ops with explicit backward passes.

use ndarray::{Array1, Array3, ArrayView1, ArrayView3, Dimension};

/// Elementwise max(0, x).
pub fn relu<D: Dimension>(x: &ndarray::Array<f64, D>) -> ndarray::Array<f64, D> {
    x.mapv(|v| v.max(0.0))
}

/// dL/dx for relu, treating the derivative at exactly zero as zero.
pub fn relu_backward<D: Dimension>(
    x: &ndarray::Array<f64, D>,
    dy: &ndarray::Array<f64, D>,
) -> ndarray::Array<f64, D> {
    let mut dx = dy.clone();
    dx.zip_mut_with(x, |d, &xv| {
        if xv <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// 2×2 average pooling with stride 2. Odd trailing rows/columns are dropped,
/// so the output is (C, H/2, W/2) with floor division.
pub fn avg_pool2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for y in 0..oh {
            for xp in 0..ow {
                out[[ci, y, xp]] = 0.25
                    * (x[[ci, 2 * y, 2 * xp]]
                        + x[[ci, 2 * y, 2 * xp + 1]]
                        + x[[ci, 2 * y + 1, 2 * xp]]
                        + x[[ci, 2 * y + 1, 2 * xp + 1]]);
            }
        }
    }
    out
}

/// Adjoint of [`avg_pool2`] for an input of size (C, h, w): spreads each
/// output gradient evenly over its 2×2 window; dropped rows/columns get
/// zero.
pub fn avg_pool2_backward(dy: ArrayView3<f64>, h: usize, w: usize) -> Array3<f64> {
    let (c, oh, ow) = dy.dim();
    assert_eq!((oh, ow), (h / 2, w / 2), "pool gradient shape");
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..oh {
            for xp in 0..ow {
                let g = 0.25 * dy[[ci, y, xp]];
                dx[[ci, 2 * y, 2 * xp]] += g;
                dx[[ci, 2 * y, 2 * xp + 1]] += g;
                dx[[ci, 2 * y + 1, 2 * xp]] += g;
                dx[[ci, 2 * y + 1, 2 * xp + 1]] += g;
            }
        }
    }
    dx
}

/// Rearranges (4C, H, W) into (C, 2H, 2W): channel group `c*4 + dy*2 + dx`
/// lands on the (dy, dx) offset of each 2×2 output cell.
pub fn pixel_shuffle2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c4, h, w) = x.dim();
    assert_eq!(c4 % 4, 0, "pixel shuffle needs channels divisible by 4");
    let c = c4 / 4;
    let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
    for co in 0..c {
        for dy in 0..2 {
            for dx in 0..2 {
                let ci = co * 4 + dy * 2 + dx;
                for y in 0..h {
                    for xp in 0..w {
                        out[[co, 2 * y + dy, 2 * xp + dx]] = x[[ci, y, xp]];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint (and inverse) permutation of [`pixel_shuffle2`].
pub fn pixel_shuffle2_backward(dy: ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = dy.dim();
    assert!(h2 % 2 == 0 && w2 % 2 == 0, "pixel shuffle gradient shape");
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array3::<f64>::zeros((4 * c, h, w));
    for co in 0..c {
        for oy in 0..2 {
            for ox in 0..2 {
                let ci = co * 4 + oy * 2 + ox;
                for y in 0..h {
                    for xp in 0..w {
                        dx[[ci, y, xp]] = dy[[co, 2 * y + oy, 2 * xp + ox]];
                    }
                }
            }
        }
    }
    dx
}

// Sample positions for a resize: output pixel centers mapped back into the
// input grid and clamped, the usual half-pixel-center convention.
fn resize_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Bilinear resize of (C, H, W) to (C, oh, ow).
pub fn bilinear_resize(x: ArrayView3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    assert!(h > 0 && w > 0 && oh > 0 && ow > 0);
    let ys = resize_taps(oh, h);
    let xs = resize_taps(ow, w);
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = x[[ci, y0, x0]] * (1.0 - fx) + x[[ci, y0, x1]] * fx;
                let bot = x[[ci, y1, x0]] * (1.0 - fx) + x[[ci, y1, x1]] * fx;
                out[[ci, oy, ox]] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Adjoint of [`bilinear_resize`] back onto an input of size (C, ih, iw).
pub fn bilinear_resize_backward(dy: ArrayView3<f64>, ih: usize, iw: usize) -> Array3<f64> {
    let (c, oh, ow) = dy.dim();
    let ys = resize_taps(oh, ih);
    let xs = resize_taps(ow, iw);
    let mut dx = Array3::<f64>::zeros((c, ih, iw));
    for ci in 0..c {
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let g = dy[[ci, oy, ox]];
                dx[[ci, y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
                dx[[ci, y0, x1]] += g * (1.0 - fy) * fx;
                dx[[ci, y1, x0]] += g * fy * (1.0 - fx);
                dx[[ci, y1, x1]] += g * fy * fx;
            }
        }
    }
    dx
}

/// Numerically stable softmax.
pub fn softmax(v: ArrayView1<f64>) -> Array1<f64> {
    let max = v.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut out = v.mapv(|x| (x - max).exp());
    let sum: f64 = out.sum();
    out.mapv_inplace(|x| x / sum);
    out
}

/// dL/dlogits given the softmax output `y` and dL/dy.
pub fn softmax_backward(y: &Array1<f64>, dy: &Array1<f64>) -> Array1<f64> {
    let dot: f64 = y.iter().zip(dy.iter()).map(|(a, b)| a * b).sum();
    Array1::from_iter(y.iter().zip(dy.iter()).map(|(&yi, &di)| yi * (di - dot)))
}

/// Maps an out-of-range index back inside [0, n) by mirroring at the
/// borders with edge repetition: -1 -> 0, -2 -> 1, n -> n-1, n+1 -> n-2.
pub fn mirror_index(i: isize, n: usize) -> usize {
    debug_assert!(n > 0);
    let period = 2 * n as isize;
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand3(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn relu_clamps_and_masks() {
        let x = Array2::from_shape_vec((1, 4), vec![-2.0, 0.0, 0.5, 3.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 3.0]);
        let dy = Array2::from_elem((1, 4), 1.0);
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn pool_preserves_constants_and_has_adjoint_backward() {
        let x = Array3::from_elem((2, 6, 6), 0.37);
        let y = avg_pool2(x.view());
        assert_eq!(y.dim(), (2, 3, 3));
        assert!(y.iter().all(|&v| (v - 0.37).abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand3(&mut rng, 1, 5, 7); // odd sizes exercise the dropped tail
        let y = avg_pool2(x.view());
        assert_eq!(y.dim(), (1, 2, 3));
        let g = rand3(&mut rng, 1, 2, 3);
        let lhs = (&y * &g).sum();
        let dx = avg_pool2_backward(g.view(), 5, 7);
        let rhs = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // Dropped row/column receives no gradient.
        assert!(dx.index_axis(ndarray::Axis(1), 4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_shuffle_layout_and_inverse() {
        let x = Array3::from_shape_fn((4, 1, 1), |(c, _, _)| c as f64);
        let y = pixel_shuffle2(x.view());
        assert_eq!(y.dim(), (1, 2, 2));
        assert_eq!(y[[0, 0, 0]], 0.0);
        assert_eq!(y[[0, 0, 1]], 1.0);
        assert_eq!(y[[0, 1, 0]], 2.0);
        assert_eq!(y[[0, 1, 1]], 3.0);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand3(&mut rng, 8, 3, 2);
        let round = pixel_shuffle2_backward(pixel_shuffle2(x.view()).view());
        assert_eq!(round, x);
    }

    #[test]
    fn bilinear_identity_and_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand3(&mut rng, 2, 4, 5);
        assert_eq!(bilinear_resize(x.view(), 4, 5), x);

        let y = bilinear_resize(x.view(), 7, 3);
        let g = rand3(&mut rng, 2, 7, 3);
        let lhs = (&y * &g).sum();
        let dx = bilinear_resize_backward(g.view(), 4, 5);
        let rhs = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn bilinear_doubling_interpolates_midpoints() {
        let x = Array3::from_shape_vec((1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(x.view(), 1, 4);
        // Centers map to -0.25, 0.25, 0.75, 1.25 -> clamped ends, interior interpolated.
        let expect = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_normalizes_and_backward_matches_fd() {
        let v = Array1::from_vec(vec![0.3, -1.2, 2.0, 0.0]);
        let y = softmax(v.view());
        assert!((y.sum() - 1.0).abs() < 1e-12);
        assert!(y.iter().all(|&p| p > 0.0));

        // Singleton softmax is exactly 1.
        let one = softmax(Array1::from_vec(vec![5.0]).view());
        assert_eq!(one[0], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let probe = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let dx = softmax_backward(&y, &probe);
        let step = 1e-6;
        for i in 0..4 {
            let mut vp = v.clone();
            vp[i] += step;
            let up = (&softmax(vp.view()) * &probe).sum();
            vp[i] -= 2.0 * step;
            let down = (&softmax(vp.view()) * &probe).sum();
            let numeric = (up - down) / (2.0 * step);
            assert!((dx[i] - numeric).abs() < 1e-8, "{} vs {}", dx[i], numeric);
        }
    }

    #[test]
    fn mirror_index_repeats_edges() {
        let n = 4;
        let got: Vec<usize> = (-4..8).map(|i| mirror_index(i, n)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(mirror_index(-1, 1), 0);
        assert_eq!(mirror_index(5, 1), 0);
    }
}
