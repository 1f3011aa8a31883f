//! Y-channel quality metrics and benchmark execution over clip sets.

use ndarray::{Array1, Array2, Array3};
use serde::Serialize;

use crate::flow::FlowField;
use crate::model::{bicubic_upsample, SatVsr};
use crate::video::{gaussian_kernel, rgb_to_y, FrameSequence};
use crate::{Error, Result};

const PSNR_CAP: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 1e-4; // (K1·L)², K1 = 0.01, L = 1
const SSIM_C2: f64 = 9e-4; // (K2·L)², K2 = 0.03

pub fn clamp01(frame: &Array3<f64>) -> Array3<f64> {
    frame.mapv(|v| v.clamp(0.0, 1.0))
}

fn y_plane(frame: &Array3<f64>) -> Array2<f64> {
    rgb_to_y(&clamp01(frame))
}

/// Peak signal-to-noise ratio between the Y planes, in dB, capped at 100.
pub fn psnr_y(sr: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if sr.dim() != gt.dim() {
        return Err(Error::shape("PSNR inputs must share a shape"));
    }
    let (ys, yg) = (y_plane(sr), y_plane(gt));
    let mse = ys
        .iter()
        .zip(yg.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / ys.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

// Valid-mode separable filtering: horizontal then vertical pass.
fn valid_sep_filter(img: &Array2<f64>, k: &Array1<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let taps = k.len();
    let mut mid = Array2::<f64>::zeros((h, w - taps + 1));
    for y in 0..h {
        for x in 0..w - taps + 1 {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + j]];
            }
            mid[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - taps + 1, w - taps + 1));
    for y in 0..h - taps + 1 {
        for x in 0..w - taps + 1 {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                acc += kv * mid[[y + j, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Single-scale SSIM on the Y planes: 11×11 Gaussian window (σ = 1.5),
/// averaged over valid (un-padded) window positions.
pub fn ssim_y(sr: &Array3<f64>, gt: &Array3<f64>) -> Result<f64> {
    if sr.dim() != gt.dim() {
        return Err(Error::shape("SSIM inputs must share a shape"));
    }
    let (x, y) = (y_plane(sr), y_plane(gt));
    let (h, w) = x.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "frame {h}×{w} smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} SSIM window"
        )));
    }
    let k = Array1::from(gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW));
    let mu_x = valid_sep_filter(&x, &k);
    let mu_y = valid_sep_filter(&y, &k);
    let xx = valid_sep_filter(&(&x * &x), &k);
    let yy = valid_sep_filter(&(&y * &y), &k);
    let xy = valid_sep_filter(&(&x * &y), &k);
    let mut total = 0.0;
    for ((((mx, my), sxx), syy), sxy) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter())
        .zip(yy.iter())
        .zip(xy.iter())
    {
        let var_x = sxx - mx * mx;
        let var_y = syy - my * my;
        let cov = sxy - mx * my;
        let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (mx * mx + my * my + SSIM_C1) * (var_x + var_y + SSIM_C2);
        total += num / den;
    }
    Ok(total / mu_x.len() as f64)
}

/// One clip's inputs for a benchmark run; `hr` may be absent, in which case
/// the clip is skipped with a warning.
pub struct EvalItem {
    pub clip_id: String,
    pub lr: FrameSequence,
    pub flows: Vec<FlowField>,
    pub hr: Option<FrameSequence>,
}

/// What produces the SR frames under evaluation.
pub enum EvalModel<'a> {
    Network(&'a SatVsr),
    Bicubic { scale: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct ClipScore {
    pub clip_id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub dataset: String,
    pub config_hash: String,
}

#[derive(Serialize)]
pub struct MetricsReport {
    pub per_clip: Vec<ClipScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub skipped: Vec<String>,
    pub meta: ReportMeta,
}

impl MetricsReport {
    /// Table with one `PSNR/SSIM` pair per clip plus the aggregate line.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "dataset {}  checkpoint {}  config {}\n",
            self.meta.dataset, self.meta.checkpoint, self.meta.config_hash
        ));
        for row in &self.per_clip {
            out.push_str(&format!("{}  {:.2}/{:.4}\n", row.clip_id, row.psnr, row.ssim));
        }
        out.push_str(&format!(
            "mean ({} clips)  {:.2}/{:.4}\n",
            self.per_clip.len(),
            self.mean_psnr,
            self.mean_ssim
        ));
        for id in &self.skipped {
            out.push_str(&format!("skipped {id} (no ground truth)\n"));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Forwards every clip's reference frame, clamps, and scores both metrics.
pub fn run_benchmark(
    model: &EvalModel,
    items: &[EvalItem],
    meta: ReportMeta,
) -> Result<MetricsReport> {
    let mut per_clip = Vec::new();
    let mut skipped = Vec::new();
    for item in items {
        let Some(hr) = &item.hr else {
            eprintln!("warning: {}: no ground truth, skipping", item.clip_id);
            skipped.push(item.clip_id.clone());
            continue;
        };
        let sr = match model {
            EvalModel::Network(net) => net.forward(&item.lr, &item.flows)?,
            EvalModel::Bicubic { scale } => {
                bicubic_upsample(&item.lr.frames[item.lr.reference_index()], *scale)
            }
        };
        let sr = clamp01(&sr);
        let gt = &hr.frames[hr.reference_index()];
        per_clip.push(ClipScore {
            clip_id: item.clip_id.clone(),
            psnr: psnr_y(&sr, gt)?,
            ssim: ssim_y(&sr, gt)?,
        });
    }
    if per_clip.is_empty() {
        return Err(Error::data("no clips were evaluated"));
    }
    let n = per_clip.len() as f64;
    let mean_psnr = per_clip.iter().map(|c| c.psnr).sum::<f64>() / n;
    let mean_ssim = per_clip.iter().map(|c| c.ssim).sum::<f64>() / n;
    Ok(MetricsReport { per_clip, mean_psnr, mean_ssim, skipped, meta })
}
