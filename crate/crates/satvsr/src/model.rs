//! The assembled network: shared per-frame feature extraction, positional
//! embedding, scenario or global attention, optional cross-scale
//! aggregation, and a pixel-shuffle reconstruction head over a bicubic skip.

use ndarray::{Array3, Axis};

use crate::attention::{GlobalAttention, SatAttention, SatSelection};
use crate::config::{AttentionMode, ModelConfig};
use crate::crossscale::CsnaModule;
use crate::features::{
    merge_patches, split_patches, FeatureExtractor, FeatureMap, QkvProjector, TokenGrid,
};
use crate::flow::{build_labels, FlowField, LabelGrid};
use crate::nn::{
    pixel_shuffle2, pixel_shuffle2_backward, Conv2d, GradStore, Init, ParamId, ParamStore,
};
use crate::posenc::{add_pe, add_pe_bias_grad, sinusoidal_pe};
use crate::video::FrameSequence;
use crate::{Error, Result};

// Catmull-Rom kernel (a = -0.5).
fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

// Per output index: four clamped source taps and their weights, under the
// half-pixel center convention src = (dst + 0.5)/scale - 0.5.
fn cubic_taps(n_src: usize, n_dst: usize, scale: usize) -> Vec<([usize; 4], [f64; 4])> {
    let mut taps = Vec::with_capacity(n_dst);
    for d in 0..n_dst {
        let src = (d as f64 + 0.5) / scale as f64 - 0.5;
        let base = src.floor();
        let t = src - base;
        let mut idx = [0usize; 4];
        let mut wgt = [0f64; 4];
        for (j, off) in (-1i64..3).enumerate() {
            let raw = base as i64 + off;
            idx[j] = raw.clamp(0, n_src as i64 - 1) as usize;
            wgt[j] = cubic_weight(off as f64 - t);
        }
        taps.push((idx, wgt));
    }
    taps
}

/// Bicubic upsampling of an (H, W, 3) frame by an integer factor, separable
/// Catmull-Rom with edge clamping.
pub fn bicubic_upsample(frame: &Array3<f64>, scale: usize) -> Array3<f64> {
    let (h, w, ch) = frame.dim();
    let (oh, ow) = (h * scale, w * scale);
    let xtaps = cubic_taps(w, ow, scale);
    let ytaps = cubic_taps(h, oh, scale);
    // Horizontal pass, then vertical.
    let mut mid = Array3::<f64>::zeros((h, ow, ch));
    for y in 0..h {
        for (x, (idx, wgt)) in xtaps.iter().enumerate() {
            for c in 0..ch {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += wgt[j] * frame[[y, idx[j], c]];
                }
                mid[[y, x, c]] = acc;
            }
        }
    }
    let mut out = Array3::<f64>::zeros((oh, ow, ch));
    for (y, (idx, wgt)) in ytaps.iter().enumerate() {
        for x in 0..ow {
            for c in 0..ch {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += wgt[j] * mid[[idx[j], x, c]];
                }
                out[[y, x, c]] = acc;
            }
        }
    }
    out
}

/// Two conv+depth-to-space doublings, then a zero-initialized projection to
/// RGB that is added onto the bicubic skip.
pub struct ReconHead {
    pub up1: Conv2d,
    pub up2: Conv2d,
    pub out: Conv2d,
}

pub struct ReconTrace {
    s1: Array3<f64>,
    s2: Array3<f64>,
}

impl ReconHead {
    pub fn new(ps: &mut ParamStore, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        ReconHead {
            up1: Conv2d::new(ps, "recon.up1", c, 4 * c, 3, Init::FanIn(c * 9)),
            up2: Conv2d::new(ps, "recon.up2", c, 4 * c, 3, Init::FanIn(c * 9)),
            out: Conv2d::new(ps, "recon.out", c, 3, 3, Init::Zeros),
        }
    }

    /// (C, H, W) features → (3, 4H, 4W) residual.
    pub fn forward(&self, ps: &ParamStore, feat: &Array3<f64>) -> (Array3<f64>, ReconTrace) {
        let s1 = pixel_shuffle2(self.up1.forward(ps, feat.view()).view());
        let s2 = pixel_shuffle2(self.up2.forward(ps, s1.view()).view());
        let res = self.out.forward(ps, s2.view());
        (res, ReconTrace { s1, s2 })
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        gs: &mut GradStore,
        feat: &Array3<f64>,
        trace: &ReconTrace,
        dres: &Array3<f64>,
    ) -> Array3<f64> {
        let ds2 = self.out.backward(ps, gs, trace.s2.view(), dres.view());
        let du2 = pixel_shuffle2_backward(ds2.view());
        let ds1 = self.up2.backward(ps, gs, trace.s1.view(), du2.view());
        let du1 = pixel_shuffle2_backward(ds1.view());
        self.up1.backward(ps, gs, feat.view(), du1.view())
    }
}

/// Everything one forward pass computed, kept for the backward pass and for
/// inspection in tests.
pub struct ForwardTrace {
    pub features: FeatureMap,
    pub y: FeatureMap,
    pub qmap: FeatureMap,
    pub kmap: FeatureMap,
    pub vmap: FeatureMap,
    pub qgrid: TokenGrid,
    pub kgrid: TokenGrid,
    pub vgrid: TokenGrid,
    pub labels: Option<LabelGrid>,
    pub selection: Option<SatSelection>,
    pub attended: TokenGrid,
    pub aggregated: TokenGrid,
    pub merged: Array3<f64>,
    recon: ReconTrace,
    pub bicubic: Array3<f64>,
    pub sr: Array3<f64>,
}

/// The full model. All parameters live in one name-keyed store so ablation
/// variants built from the same seed share identical weights for every
/// module they have in common.
pub struct SatVsr {
    pub cfg: ModelConfig,
    pub ps: ParamStore,
    pub extractor: FeatureExtractor,
    pub qkv: QkvProjector,
    pub sat: Option<SatAttention>,
    pub csna: Option<CsnaModule>,
    pub recon: ReconHead,
    pe_bias: Option<ParamId>,
    pe_geom: (usize, usize, usize),
}

impl SatVsr {
    /// `input_hw` is the LR geometry the model is built for; it is binding
    /// only when `learnable_pe` pins a per-position bias to it.
    pub fn new(cfg: ModelConfig, input_hw: (usize, usize), seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = input_hw;
        if h == 0 || w == 0 || h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(Error::config(format!(
                "input {h}×{w} is not a positive multiple of patch {}",
                cfg.patch
            )));
        }
        if cfg.csna_enabled && (h % 8 != 0 || w % 8 != 0) {
            return Err(Error::config(format!(
                "cross-scale aggregation needs input dims divisible by 8, got {h}×{w}"
            )));
        }
        let mut ps = ParamStore::new(seed);
        let extractor = FeatureExtractor::new(&mut ps, &cfg);
        let qkv = QkvProjector::new(&mut ps, &cfg);
        let sat = match cfg.attention_mode {
            AttentionMode::Sat => Some(SatAttention::new(&mut ps, &cfg)),
            AttentionMode::Global => None,
        };
        let csna = cfg
            .csna_enabled
            .then(|| CsnaModule::new(&mut ps, cfg.channels, cfg.pyramid_levels));
        let recon = ReconHead::new(&mut ps, &cfg);
        let pe_geom = (cfg.frames(), h / cfg.patch, w / cfg.patch);
        let pe_bias = cfg.learnable_pe.then(|| {
            ps.register(
                "pe.bias",
                &[pe_geom.0, pe_geom.1, pe_geom.2, cfg.channels],
                Init::Zeros,
            )
        });
        Ok(SatVsr { cfg, ps, extractor, qkv, sat, csna, recon, pe_bias, pe_geom })
    }

    fn check_input(&self, lr: &FrameSequence, flows: &[FlowField]) -> Result<()> {
        if lr.t() != self.cfg.frames() {
            return Err(Error::shape(format!(
                "clip has {} frames, the model wants {}",
                lr.t(),
                self.cfg.frames()
            )));
        }
        let (h, w) = (lr.height(), lr.width());
        if h % self.cfg.patch != 0 || w % self.cfg.patch != 0 {
            return Err(Error::shape(format!(
                "frame {h}×{w} is not a multiple of patch {}",
                self.cfg.patch
            )));
        }
        if self.cfg.learnable_pe {
            let want = (self.cfg.frames(), h / self.cfg.patch, w / self.cfg.patch);
            if want != self.pe_geom {
                return Err(Error::shape(format!(
                    "learnable positional bias is pinned to a {:?} grid, input implies {:?}",
                    self.pe_geom, want
                )));
            }
        }
        if self.cfg.attention_mode == AttentionMode::Sat && flows.len() != lr.t() {
            return Err(Error::shape(format!(
                "{} flow fields for a {}-frame clip",
                flows.len(),
                lr.t()
            )));
        }
        Ok(())
    }

    pub fn forward_traced(
        &self,
        lr: &FrameSequence,
        flows: &[FlowField],
    ) -> Result<ForwardTrace> {
        self.check_input(lr, flows)?;
        let cfg = &self.cfg;
        let t_ref = cfg.reference_index();

        let features = self.extractor.forward(&self.ps, lr);
        let tokens = split_patches(&features, cfg.patch, cfg.stride)?;
        let (t, rows, cols, ..) = tokens.dim();
        let pe = sinusoidal_pe(t, rows, cols, cfg.pe_channels)?;
        let bias = self.pe_bias.map(|id| self.ps.get(id));
        let y_tokens = add_pe(&tokens, &pe, bias)?;
        let y = merge_patches(&y_tokens);

        let (qmap, kmap, vmap) = self.qkv.forward(&self.ps, &y);
        let qgrid = split_patches(&qmap, cfg.patch, cfg.stride)?;
        let kgrid = split_patches(&kmap, cfg.patch, cfg.stride)?;
        let vgrid = split_patches(&vmap, cfg.patch, cfg.stride)?;

        let (attended, labels, selection) = match (&self.sat, cfg.attention_mode) {
            (Some(att), AttentionMode::Sat) => {
                let labels = build_labels(flows, cfg.patch, cfg.stride)?;
                let (out, sel) = att.forward(&self.ps, &qgrid, &kgrid, &vgrid, &labels, t_ref)?;
                (out, Some(labels), Some(sel))
            }
            _ => {
                let (out, _) = GlobalAttention::forward(&qgrid, &kgrid, &vgrid, t_ref)?;
                (out, None, None)
            }
        };

        let aggregated = match &self.csna {
            Some(csna) => csna.forward(&self.ps, &attended)?.0,
            None => attended.clone(),
        };

        let merged = merge_patches(&aggregated).index_axis(Axis(0), 0).to_owned();
        let (residual, recon) = self.recon.forward(&self.ps, &merged);
        let bicubic = bicubic_upsample(&lr.frames[t_ref], cfg.scale);
        let mut sr = bicubic.clone();
        let (oh, ow, _) = sr.dim();
        for yy in 0..oh {
            for xx in 0..ow {
                for c in 0..3 {
                    sr[[yy, xx, c]] += residual[[c, yy, xx]];
                }
            }
        }
        Ok(ForwardTrace {
            features,
            y,
            qmap,
            kmap,
            vmap,
            qgrid,
            kgrid,
            vgrid,
            labels,
            selection,
            attended,
            aggregated,
            merged,
            recon,
            bicubic,
            sr,
        })
    }

    /// SR of the reference frame, (4H, 4W, 3), unclamped.
    pub fn forward(&self, lr: &FrameSequence, flows: &[FlowField]) -> Result<Array3<f64>> {
        Ok(self.forward_traced(lr, flows)?.sr)
    }

    /// Pushes d(loss)/d(SR) through the whole network, accumulating every
    /// parameter gradient into `gs`.
    pub fn backward(
        &self,
        gs: &mut GradStore,
        lr: &FrameSequence,
        trace: &ForwardTrace,
        dsr: &Array3<f64>,
    ) -> Result<()> {
        let cfg = &self.cfg;
        let t_ref = cfg.reference_index();
        let (oh, ow, _) = trace.sr.dim();
        if dsr.dim() != (oh, ow, 3) {
            return Err(Error::shape("SR gradient shape mismatch"));
        }
        let mut dres = Array3::<f64>::zeros((3, oh, ow));
        for yy in 0..oh {
            for xx in 0..ow {
                for c in 0..3 {
                    dres[[c, yy, xx]] = dsr[[yy, xx, c]];
                }
            }
        }
        let dmerged = self.recon.backward(&self.ps, gs, &trace.merged, &trace.recon, &dres);

        let (c, h, w) = dmerged.dim();
        let mut dmap = FeatureMap::zeros((1, c, h, w));
        dmap.index_axis_mut(Axis(0), 0).assign(&dmerged);
        let dagg = split_patches(&dmap, cfg.patch, cfg.stride)?;

        let dattended = match &self.csna {
            Some(csna) => csna.backward(&self.ps, gs, &trace.attended, &dagg)?,
            None => dagg,
        };

        let (dqg, dkg, dvg) = match (&self.sat, &trace.labels) {
            (Some(att), Some(labels)) => att.backward(
                &self.ps,
                gs,
                &trace.qgrid,
                &trace.kgrid,
                &trace.vgrid,
                labels,
                t_ref,
                &dattended,
            )?,
            _ => GlobalAttention::backward(
                &trace.qgrid,
                &trace.kgrid,
                &trace.vgrid,
                t_ref,
                &dattended,
            )?,
        };

        let dqmap = merge_patches(&dqg);
        let dkmap = merge_patches(&dkg);
        let dvmap = merge_patches(&dvg);
        let dy = self.qkv.backward(&self.ps, gs, &trace.y, &dqmap, &dkmap, &dvmap);

        if let Some(id) = self.pe_bias {
            let dy_tokens = split_patches(&dy, cfg.patch, cfg.stride)?;
            gs.add(id, &add_pe_bias_grad(&dy_tokens).into_dyn());
        }
        // The embedding add is an identity on the feature path.
        self.extractor.backward(&self.ps, gs, lr, &dy);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.ps.total_elements()
    }

    /// One line per parameter tensor (name, shape, element count) plus a
    /// total, in registration order.
    pub fn describe(&self) -> String {
        let mut out = String::new();
        for (name, tensor) in self.ps.entries() {
            out.push_str(&format!("{name}  {:?}  {}\n", tensor.shape(), tensor.len()));
        }
        out.push_str(&format!("total parameters: {}\n", self.param_count()));
        out
    }
}
