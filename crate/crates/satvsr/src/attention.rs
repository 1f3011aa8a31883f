//! Scenario-corresponding attention and the global-attention baseline.
//!
//! Both paths answer the same question for every reference-frame patch:
//! which content from the clip should supplement it. The scenario path
//! follows motion labels — for each support frame it looks at exactly one
//! labeled key token, keeps the single most cosine-similar frame, and fuses
//! [query, similarity·value] back to C channels with a 1×1 convolution. The
//! baseline instead runs plain scaled-dot-product attention against every
//! patch in space and time.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};

use crate::config::ModelConfig;
use crate::features::{token_view, TokenGrid};
use crate::flow::LabelGrid;
use crate::nn::{softmax, softmax_backward, Conv2d, GradStore, Init, ParamStore};
use crate::{Error, Result};

const NORM_EPS: f64 = 1e-12;

fn dot_and_norms(a: ArrayView3<f64>, b: ArrayView3<f64>) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    (dot, na.sqrt(), nb.sqrt())
}

/// Cosine similarity of two equally shaped tokens; 0 when either norm falls
/// below 1e-12 (degenerate-token rule).
pub fn cosine_corr(a: ArrayView3<f64>, b: ArrayView3<f64>) -> f64 {
    let (dot, na, nb) = dot_and_norms(a, b);
    if na < NORM_EPS || nb < NORM_EPS {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The winning (frame, patch, similarity) per reference patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SatSelection {
    pub frame: Array2<usize>,
    pub patch: Array2<usize>,
    pub score: Array2<f64>,
}

fn check_grids(q: &TokenGrid, k: &TokenGrid, v: &TokenGrid, t_ref: usize) -> Result<()> {
    if q.dim() != k.dim() || q.dim() != v.dim() {
        return Err(Error::shape("q/k/v token grids must share a shape"));
    }
    if t_ref >= q.dim().0 {
        return Err(Error::shape(format!(
            "reference frame {t_ref} outside a {}-frame clip",
            q.dim().0
        )));
    }
    Ok(())
}

fn check_labels(tokens: &TokenGrid, labels: &LabelGrid) -> Result<()> {
    let (t, rows, cols, ..) = tokens.dim();
    if labels.rows != rows || labels.cols != cols || labels.t() != t {
        return Err(Error::shape(format!(
            "label grid {}×{}×{} does not cover a {t}×{rows}×{cols} token grid",
            labels.rows,
            labels.cols,
            labels.t()
        )));
    }
    if labels.labels.iter().any(|&l| l >= rows * cols) {
        return Err(Error::data("label index out of patch range"));
    }
    Ok(())
}

/// For every reference patch, the most cosine-similar labeled key across
/// the temporal axis; score ties keep the smallest frame index.
pub fn select_most_relevant(
    q: &TokenGrid,
    k: &TokenGrid,
    labels: &LabelGrid,
    t_ref: usize,
) -> Result<SatSelection> {
    check_grids(q, k, k, t_ref)?;
    check_labels(q, labels)?;
    let (t, rows, cols, ..) = q.dim();
    let mut frame = Array2::<usize>::zeros((rows, cols));
    let mut patch = Array2::<usize>::zeros((rows, cols));
    let mut score = Array2::<f64>::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let qt = token_view(q, t_ref, r, c);
            let p = r * cols + c;
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for i in 0..t {
                let label = labels.labels[[p, i]];
                let kt = token_view(k, i, label / cols, label % cols);
                let corr = cosine_corr(qt, kt);
                if corr > best {
                    best = corr;
                    best_i = i;
                }
            }
            frame[[r, c]] = best_i;
            patch[[r, c]] = labels.labels[[p, best_i]];
            score[[r, c]] = best;
        }
    }
    Ok(SatSelection { frame, patch, score })
}

/// The scenario-corresponding path: label-guided top-1 selection plus the
/// 1×1 fusion of [Q, s·V] back to C channels.
pub struct SatAttention {
    pub fuse: Conv2d,
}

impl SatAttention {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        SatAttention { fuse: Conv2d::new(ps, "att.fuse", 2 * c, c, 1, Init::FanIn(2 * c)) }
    }

    fn concat_input(
        q: &TokenGrid,
        v: &TokenGrid,
        sel: &SatSelection,
        t_ref: usize,
        r: usize,
        c: usize,
    ) -> Array3<f64> {
        let (_, _, cols, ch, p, _) = q.dim();
        let mut cat = Array3::<f64>::zeros((2 * ch, p, p));
        cat.slice_mut(s![0..ch, .., ..]).assign(&token_view(q, t_ref, r, c));
        let (vi, vp, s_val) = (sel.frame[[r, c]], sel.patch[[r, c]], sel.score[[r, c]]);
        let vt = token_view(v, vi, vp / cols, vp % cols);
        let mut tail = cat.slice_mut(s![ch..2 * ch, .., ..]);
        tail.assign(&vt);
        tail *= s_val;
        cat
    }

    /// Returns the fused reference tokens as a one-frame grid plus the
    /// selection that produced them.
    pub fn forward(
        &self,
        ps: &ParamStore,
        q: &TokenGrid,
        k: &TokenGrid,
        v: &TokenGrid,
        labels: &LabelGrid,
        t_ref: usize,
    ) -> Result<(TokenGrid, SatSelection)> {
        check_grids(q, k, v, t_ref)?;
        let sel = select_most_relevant(q, k, labels, t_ref)?;
        let (_, rows, cols, ch, p, _) = q.dim();
        let mut out = TokenGrid::zeros((1, rows, cols, ch, p, p));
        for r in 0..rows {
            for c in 0..cols {
                let cat = Self::concat_input(q, v, &sel, t_ref, r, c);
                let fused = self.fuse.forward(ps, cat.view());
                out.slice_mut(s![0, r, c, .., .., ..]).assign(&fused);
            }
        }
        Ok((out, sel))
    }

    /// Gradients flow through the fusion conv, the selected value token, the
    /// similarity scalar, and from there into the query and the selected
    /// key; the hard selection itself is treated as a constant.
    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        q: &TokenGrid,
        k: &TokenGrid,
        v: &TokenGrid,
        labels: &LabelGrid,
        t_ref: usize,
        dout: &TokenGrid,
    ) -> Result<(TokenGrid, TokenGrid, TokenGrid)> {
        check_grids(q, k, v, t_ref)?;
        let sel = select_most_relevant(q, k, labels, t_ref)?;
        let (_, rows, cols, ch, p, _) = q.dim();
        if dout.dim() != (1, rows, cols, ch, p, p) {
            return Err(Error::shape("attention output gradient shape mismatch"));
        }
        let mut dq = TokenGrid::zeros(q.raw_dim());
        let mut dk = TokenGrid::zeros(k.raw_dim());
        let mut dv = TokenGrid::zeros(v.raw_dim());
        for r in 0..rows {
            for c in 0..cols {
                let cat = Self::concat_input(q, v, &sel, t_ref, r, c);
                let dcat =
                    self.fuse.backward(ps, gs, cat.view(), dout.slice(s![0, r, c, .., .., ..]));
                let (vi, vp, s_val) = (sel.frame[[r, c]], sel.patch[[r, c]], sel.score[[r, c]]);
                let (vr, vc) = (vp / cols, vp % cols);
                let dsv = dcat.slice(s![ch..2 * ch, .., ..]);

                // Direct query contribution from the concatenation.
                {
                    let mut slot = dq.slice_mut(s![t_ref, r, c, .., .., ..]);
                    slot += &dcat.slice(s![0..ch, .., ..]);
                }
                // Selected value token: out tail = s · V.
                {
                    let mut slot = dv.slice_mut(s![vi, vr, vc, .., .., ..]);
                    slot.zip_mut_with(&dsv, |d, g| *d += s_val * g);
                }
                // Similarity scalar: ds = <dtail, V>, then the cosine
                // derivative spreads it onto the query and the selected key.
                let vt = token_view(v, vi, vp / cols, vp % cols);
                let ds: f64 = dsv.iter().zip(vt.iter()).map(|(a, b)| a * b).sum();
                let ki = sel.frame[[r, c]];
                let kp = sel.patch[[r, c]];
                let qt = token_view(q, t_ref, r, c);
                let kt = token_view(k, ki, kp / cols, kp % cols);
                let (dot, nq, nk) = dot_and_norms(qt, kt);
                if nq >= NORM_EPS && nk >= NORM_EPS {
                    let corr = dot / (nq * nk);
                    let mut slot = dq.slice_mut(s![t_ref, r, c, .., .., ..]);
                    slot.zip_mut_with(&kt, |d, &kv| *d += ds * kv / (nq * nk));
                    slot.zip_mut_with(&qt, |d, &qv| *d -= ds * corr * qv / (nq * nq));
                    let mut slot = dk.slice_mut(s![ki, kp / cols, kp % cols, .., .., ..]);
                    slot.zip_mut_with(&qt, |d, &qv| *d += ds * qv / (nq * nk));
                    slot.zip_mut_with(&kt, |d, &kv| *d -= ds * corr * kv / (nk * nk));
                }
            }
        }
        Ok((dq, dk, dv))
    }
}

// Token grid flattened to (T·N, D) rows in frame-major, row-major-patch
// order; D = C·P².
fn tokens_as_matrix(tokens: &TokenGrid) -> Array2<f64> {
    let (t, rows, cols, c, p, _) = tokens.dim();
    let d = c * p * p;
    let mut m = Array2::<f64>::zeros((t * rows * cols, d));
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                let row = (ti * rows + r) * cols + cl;
                for (dst, src) in m
                    .row_mut(row)
                    .iter_mut()
                    .zip(token_view(tokens, ti, r, cl).iter())
                {
                    *dst = *src;
                }
            }
        }
    }
    m
}

fn matrix_rows_to_grid(m: &Array2<f64>, like: &TokenGrid) -> TokenGrid {
    let (t, rows, cols, c, p, _) = like.dim();
    let mut g = TokenGrid::zeros((t, rows, cols, c, p, p));
    for ti in 0..t {
        for r in 0..rows {
            for cl in 0..cols {
                let row = (ti * rows + r) * cols + cl;
                let mut dst = g.slice_mut(s![ti, r, cl, .., .., ..]);
                for (d, src) in dst.iter_mut().zip(m.row(row).iter()) {
                    *d = *src;
                }
            }
        }
    }
    g
}

/// The ablation baseline: every reference query attends to all T·N keys
/// with scaled-dot-product softmax weights; the output is the weighted sum
/// of value tokens. No parameters.
pub struct GlobalAttention;

impl GlobalAttention {
    /// Returns the attended reference tokens plus the (N, T·N) weight
    /// matrix, one probability row per query.
    pub fn forward(
        q: &TokenGrid,
        k: &TokenGrid,
        v: &TokenGrid,
        t_ref: usize,
    ) -> Result<(TokenGrid, Array2<f64>)> {
        check_grids(q, k, v, t_ref)?;
        let (_, rows, cols, c, p, _) = q.dim();
        let n = rows * cols;
        let d = c * p * p;
        let scale = 1.0 / (d as f64).sqrt();
        let kmat = tokens_as_matrix(k);
        let vmat = tokens_as_matrix(v);
        let qmat = tokens_as_matrix(q);
        let qref = qmat.slice(s![t_ref * n..(t_ref + 1) * n, ..]);
        let logits = qref.dot(&kmat.t()) * scale;
        let mut weights = Array2::<f64>::zeros(logits.raw_dim());
        for (mut wrow, lrow) in weights.axis_iter_mut(Axis(0)).zip(logits.axis_iter(Axis(0))) {
            wrow.assign(&softmax(lrow));
        }
        let out_mat = weights.dot(&vmat);
        let mut out = TokenGrid::zeros((1, rows, cols, c, p, p));
        for r in 0..rows {
            for cl in 0..cols {
                let mut dst = out.slice_mut(s![0, r, cl, .., .., ..]);
                for (dv, src) in dst.iter_mut().zip(out_mat.row(r * cols + cl).iter()) {
                    *dv = *src;
                }
            }
        }
        Ok((out, weights))
    }

    pub fn backward(
        q: &TokenGrid,
        k: &TokenGrid,
        v: &TokenGrid,
        t_ref: usize,
        dout: &TokenGrid,
    ) -> Result<(TokenGrid, TokenGrid, TokenGrid)> {
        check_grids(q, k, v, t_ref)?;
        let (t, rows, cols, c, p, _) = q.dim();
        let n = rows * cols;
        let d = c * p * p;
        if dout.dim() != (1, rows, cols, c, p, p) {
            return Err(Error::shape("attention output gradient shape mismatch"));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let kmat = tokens_as_matrix(k);
        let vmat = tokens_as_matrix(v);
        let qmat = tokens_as_matrix(q);
        let qref = qmat.slice(s![t_ref * n..(t_ref + 1) * n, ..]).to_owned();
        let logits = qref.dot(&kmat.t()) * scale;
        let mut weights = Array2::<f64>::zeros(logits.raw_dim());
        for (mut wrow, lrow) in weights.axis_iter_mut(Axis(0)).zip(logits.axis_iter(Axis(0))) {
            wrow.assign(&softmax(lrow));
        }

        let mut dout_mat = Array2::<f64>::zeros((n, d));
        for r in 0..rows {
            for cl in 0..cols {
                for (dst, src) in dout_mat
                    .row_mut(r * cols + cl)
                    .iter_mut()
                    .zip(dout.slice(s![0, r, cl, .., .., ..]).iter())
                {
                    *dst = *src;
                }
            }
        }

        let dvmat = weights.t().dot(&dout_mat);
        let dwe = dout_mat.dot(&vmat.t());
        let mut dlogits = Array2::<f64>::zeros((n, t * n));
        for i in 0..n {
            let wrow = weights.row(i).to_owned();
            let drow = dwe.row(i).to_owned();
            dlogits
                .row_mut(i)
                .assign(&softmax_backward(&wrow, &Array1::from(drow.to_vec())));
        }
        let dqref = dlogits.dot(&kmat) * scale;
        let dkmat = dlogits.t().dot(&qref) * scale;

        let mut dqmat = Array2::<f64>::zeros((t * n, d));
        dqmat.slice_mut(s![t_ref * n..(t_ref + 1) * n, ..]).assign(&dqref);
        Ok((
            matrix_rows_to_grid(&dqmat, q),
            matrix_rows_to_grid(&dkmat, k),
            matrix_rows_to_grid(&dvmat, v),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tokens(
        rng: &mut ChaCha8Rng,
        t: usize,
        rows: usize,
        cols: usize,
        c: usize,
        p: usize,
    ) -> TokenGrid {
        Array6::from_shape_fn((t, rows, cols, c, p, p), |_| rng.random_range(-1.0..1.0))
    }

    fn identity_labels(rows: usize, cols: usize, t: usize) -> LabelGrid {
        let n = rows * cols;
        LabelGrid {
            labels: Array2::from_shape_fn((n, t), |(p, _)| p),
            rows,
            cols,
        }
    }

    fn random_labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize, t: usize) -> LabelGrid {
        let n = rows * cols;
        LabelGrid {
            labels: Array2::from_shape_fn((n, t), |_| rng.random_range(0..n)),
            rows,
            cols,
        }
    }

    #[test]
    fn cosine_basics() {
        let x = Array3::from_shape_fn((2, 2, 2), |(a, b, c)| (a + 2 * b + 4 * c) as f64 + 1.0);
        assert!((cosine_corr(x.view(), x.view()) - 1.0).abs() < 1e-12);
        let neg = x.mapv(|v| -v);
        assert!((cosine_corr(x.view(), neg.view()) + 1.0).abs() < 1e-12);

        let mut e1 = Array3::<f64>::zeros((1, 2, 2));
        let mut e2 = Array3::<f64>::zeros((1, 2, 2));
        e1[[0, 0, 0]] = 1.0;
        e2[[0, 0, 1]] = 1.0;
        assert_eq!(cosine_corr(e1.view(), e2.view()), 0.0);

        let zero = Array3::<f64>::zeros((1, 2, 2));
        assert_eq!(cosine_corr(zero.view(), x.view()), 0.0);
    }

    #[test]
    fn single_frame_selects_the_reference_with_unit_self_similarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_tokens(&mut rng, 1, 2, 2, 3, 2);
        let labels = identity_labels(2, 2, 1);
        // With the key grid equal to the query grid, the lone candidate is
        // the token itself and its cosine similarity is exactly 1.
        let sel = select_most_relevant(&q, &q, &labels, 0).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(sel.frame[[r, c]], 0);
                assert_eq!(sel.patch[[r, c]], r * 2 + c);
                assert!((sel.score[[r, c]] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equal_candidates_tie_break_to_the_first_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let one = rand_tokens(&mut rng, 1, 2, 2, 3, 2);
        let mut q = TokenGrid::zeros((3, 2, 2, 3, 2, 2));
        let mut k = TokenGrid::zeros((3, 2, 2, 3, 2, 2));
        for t in 0..3 {
            q.slice_mut(s![t, .., .., .., .., ..]).assign(&one.slice(s![0, .., .., .., .., ..]));
            k.slice_mut(s![t, .., .., .., .., ..]).assign(&one.slice(s![0, .., .., .., .., ..]));
        }
        let labels = identity_labels(2, 2, 3);
        let sel = select_most_relevant(&q, &k, &labels, 1).unwrap();
        assert!(sel.frame.iter().all(|&f| f == 0));
    }

    #[test]
    fn selection_matches_a_brute_force_oracle() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (t, rows, cols, c, p) = (5, 2, 2, 4, 2);
            let q = rand_tokens(&mut rng, t, rows, cols, c, p);
            let k = rand_tokens(&mut rng, t, rows, cols, c, p);
            let labels = random_labels(&mut rng, rows, cols, t);
            let sel = select_most_relevant(&q, &k, &labels, 2).unwrap();
            for r in 0..rows {
                for cl in 0..cols {
                    // Plain re-derivation: dot products and norms by hand.
                    let pidx = r * cols + cl;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for i in 0..t {
                        let lab = labels.labels[[pidx, i]];
                        let (mut dot, mut nq, mut nk) = (0.0, 0.0, 0.0);
                        for ch in 0..c {
                            for y in 0..p {
                                for x in 0..p {
                                    let qv = q[[2, r, cl, ch, y, x]];
                                    let kv = k[[i, lab / cols, lab % cols, ch, y, x]];
                                    dot += qv * kv;
                                    nq += qv * qv;
                                    nk += kv * kv;
                                }
                            }
                        }
                        let corr = dot / (nq.sqrt() * nk.sqrt());
                        if corr > best {
                            best = corr;
                            best_i = i;
                        }
                    }
                    assert_eq!(sel.frame[[r, cl]], best_i, "seed {seed} patch {pidx}");
                    assert!((sel.score[[r, cl]] - best).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn selection_is_invariant_to_key_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = rand_tokens(&mut rng, 4, 2, 2, 3, 2);
        let k = rand_tokens(&mut rng, 4, 2, 2, 3, 2);
        let labels = random_labels(&mut rng, 2, 2, 4);
        let a = select_most_relevant(&q, &k, &labels, 1).unwrap();
        let b = select_most_relevant(&q, &k.mapv(|v| 3.5 * v), &labels, 1).unwrap();
        assert_eq!(a.frame, b.frame);
        assert_eq!(a.patch, b.patch);
        for (x, y) in a.score.iter().zip(b.score.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sat_forward_fuses_query_and_scaled_value() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamStore::new(4);
        let att = SatAttention::new(&mut ps, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, rows, cols, c, p) = (3, 2, 2, 4, 4);
        let q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let k = rand_tokens(&mut rng, t, rows, cols, c, p);
        let v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let labels = identity_labels(rows, cols, t);
        let (out, sel) = att.forward(&ps, &q, &k, &v, &labels, 1).unwrap();
        assert_eq!(out.dim(), (1, rows, cols, c, p, p));

        // Reproduce one output token by hand.
        let (r, cl) = (1, 0);
        let cat = SatAttention::concat_input(&q, &v, &sel, 1, r, cl);
        let manual = att.fuse.forward(&ps, cat.view());
        assert_eq!(out.slice(s![0, r, cl, .., .., ..]), manual);

        // Geometry mismatch is rejected.
        let bad_labels = identity_labels(rows, cols, t + 1);
        assert!(att.forward(&ps, &q, &k, &v, &bad_labels, 1).is_err());
    }

    #[test]
    fn global_attention_weights_are_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (t, rows, cols, c, p) = (3, 2, 2, 3, 2);
        let q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let k = rand_tokens(&mut rng, t, rows, cols, c, p);
        let v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let (_, w) = GlobalAttention::forward(&q, &k, &v, 1).unwrap();
        assert_eq!(w.dim(), (4, 12));
        for row in w.axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn global_attention_singleton_and_uniform_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        // One frame, one patch: softmax over a single key is exactly 1.
        let q = rand_tokens(&mut rng, 1, 1, 1, 3, 2);
        let k = rand_tokens(&mut rng, 1, 1, 1, 3, 2);
        let v = rand_tokens(&mut rng, 1, 1, 1, 3, 2);
        let (out, w) = GlobalAttention::forward(&q, &k, &v, 0).unwrap();
        assert_eq!(w[[0, 0]], 1.0);
        assert_eq!(out.slice(s![0, 0, 0, .., .., ..]), v.slice(s![0, 0, 0, .., .., ..]));

        // Identical keys give uniform weights, so the output is the mean of
        // the value tokens.
        let (t, rows, cols, c, p) = (2, 2, 1, 2, 2);
        let q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let mut k = TokenGrid::zeros((t, rows, cols, c, p, p));
        let proto = rand_tokens(&mut rng, 1, 1, 1, c, p);
        for ti in 0..t {
            for r in 0..rows {
                k.slice_mut(s![ti, r, 0, .., .., ..])
                    .assign(&proto.slice(s![0, 0, 0, .., .., ..]));
            }
        }
        let v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let (out, w) = GlobalAttention::forward(&q, &k, &v, 0).unwrap();
        let n_keys = (t * rows * cols) as f64;
        assert!(w.iter().all(|&x| (x - 1.0 / n_keys).abs() < 1e-12));
        let mut mean = Array3::<f64>::zeros((c, p, p));
        for ti in 0..t {
            for r in 0..rows {
                mean += &token_view(&v, ti, r, 0);
            }
        }
        mean /= n_keys;
        let got = out.slice(s![0, 0, 0, .., .., ..]);
        for (a, b) in got.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    // Finite differences through both attention paths with respect to the
    // raw token grids.
    fn fd_check_tokens<F>(
        loss: F,
        q: &mut TokenGrid,
        k: &mut TokenGrid,
        v: &mut TokenGrid,
        analytic: (&TokenGrid, &TokenGrid, &TokenGrid),
        step: f64,
        tol: f64,
    ) where
        F: Fn(&TokenGrid, &TokenGrid, &TokenGrid) -> f64,
    {
        let grads = [analytic.0, analytic.1, analytic.2];
        for gi in 0..3 {
            let n = q.len();
            for idx in (0..n).step_by(11) {
                let pick = |q: &mut TokenGrid, k: &mut TokenGrid, v: &mut TokenGrid, delta: f64| {
                    let g = match gi {
                        0 => &mut *q,
                        1 => &mut *k,
                        _ => &mut *v,
                    };
                    g.as_slice_mut().unwrap()[idx] += delta;
                };
                pick(q, k, v, step);
                let up = loss(q, k, v);
                pick(q, k, v, -2.0 * step);
                let down = loss(q, k, v);
                pick(q, k, v, step);
                let numeric = (up - down) / (2.0 * step);
                let a = grads[gi].as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < tol,
                    "grid {gi} [{idx}]: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn sat_backward_matches_finite_differences() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamStore::new(10);
        let att = SatAttention::new(&mut ps, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (t, rows, cols, c, p) = (3, 2, 2, 4, 2);
        let mut q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let mut k = rand_tokens(&mut rng, t, rows, cols, c, p);
        let mut v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let labels = random_labels(&mut rng, rows, cols, t);
        let probe = rand_tokens(&mut rng, 1, rows, cols, c, p);

        // Keep away from selection ties so the finite differences stay on
        // one branch.
        for r in 0..rows {
            for cl in 0..cols {
                let pidx = r * cols + cl;
                let mut scores: Vec<f64> = (0..t)
                    .map(|i| {
                        let lab = labels.labels[[pidx, i]];
                        cosine_corr(
                            token_view(&q, 1, r, cl),
                            token_view(&k, i, lab / cols, lab % cols),
                        )
                    })
                    .collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                assert!(scores[0] - scores[1] > 1e-3, "tie margin too small for the test seed");
            }
        }

        let mut gs = GradStore::zeros_like(&ps);
        let (dq, dk, dv) =
            att.backward(&ps, &mut gs, &q, &k, &v, &labels, 1, &probe).unwrap();
        let loss = |q: &TokenGrid, k: &TokenGrid, v: &TokenGrid| {
            let (out, _) = att.forward(&ps, q, k, v, &labels, 1).unwrap();
            (&out * &probe).sum()
        };
        fd_check_tokens(loss, &mut q, &mut k, &mut v, (&dq, &dk, &dv), 1e-5, 1e-5);
    }

    #[test]
    fn sat_backward_accumulates_fuse_conv_gradients() {
        let cfg = ModelConfig::tiny();
        let mut ps = ParamStore::new(12);
        let att = SatAttention::new(&mut ps, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (t, rows, cols, c, p) = (3, 2, 2, 4, 2);
        let q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let k = rand_tokens(&mut rng, t, rows, cols, c, p);
        let v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let labels = identity_labels(rows, cols, t);
        let probe = rand_tokens(&mut rng, 1, rows, cols, c, p);

        let mut gs = GradStore::zeros_like(&ps);
        att.backward(&ps, &mut gs, &q, &k, &v, &labels, 1, &probe).unwrap();
        let loss = |ps: &ParamStore| {
            let (out, _) = att.forward(ps, &q, &k, &v, &labels, 1).unwrap();
            (&out * &probe).sum()
        };
        let step = 1e-5;
        for pid in [att.fuse.weight, att.fuse.bias] {
            let n = ps.get(pid).len();
            for idx in (0..n).step_by(5) {
                let orig = ps.get(pid).as_slice().unwrap()[idx];
                ps.get_mut(pid).as_slice_mut().unwrap()[idx] = orig + step;
                let up = loss(&ps);
                ps.get_mut(pid).as_slice_mut().unwrap()[idx] = orig - step;
                let down = loss(&ps);
                ps.get_mut(pid).as_slice_mut().unwrap()[idx] = orig;
                let numeric = (up - down) / (2.0 * step);
                let analytic = gs.get(pid).as_slice().unwrap()[idx];
                assert!((analytic - numeric).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn global_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (t, rows, cols, c, p) = (3, 2, 2, 3, 2);
        let mut q = rand_tokens(&mut rng, t, rows, cols, c, p);
        let mut k = rand_tokens(&mut rng, t, rows, cols, c, p);
        let mut v = rand_tokens(&mut rng, t, rows, cols, c, p);
        let probe = rand_tokens(&mut rng, 1, rows, cols, c, p);
        let (dq, dk, dv) = GlobalAttention::backward(&q, &k, &v, 1, &probe).unwrap();
        let loss = |q: &TokenGrid, k: &TokenGrid, v: &TokenGrid| {
            let (out, _) = GlobalAttention::forward(q, k, v, 1).unwrap();
            (&out * &probe).sum()
        };
        fd_check_tokens(loss, &mut q, &mut k, &mut v, (&dq, &dk, &dv), 1e-5, 1e-5);
    }
}
