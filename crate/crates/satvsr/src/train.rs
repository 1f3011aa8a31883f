//! Charbonnier training loop: cosine-annealed Adam over randomly cropped
//! clip patches, an append-only TSV loss log, and resumable checkpoints.
//!
//! Batches are drawn from a per-iteration RNG stream (the seed picks the
//! generator, the iteration index picks the stream), so the batch at
//! iteration k is the same whether the run reached k directly or through a
//! checkpoint — that is what makes resumed trajectories bitwise identical.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, ArrayD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::flow::FlowField;
use crate::model::SatVsr;
use crate::nn::{GradStore, ParamId, ParamStore};
use crate::video::synth::LabeledClip;
use crate::video::{sample_patch_origin, sample_patch_pair, FrameSequence};
use crate::{Error, Result, TrainSpec};

const ADAM_EPS: f64 = 1e-8;

/// Mean per-element Charbonnier penalty `sqrt((sr − gt)² + ε²)`.
pub fn charbonnier(sr: &Array3<f64>, gt: &Array3<f64>, eps: f64) -> Result<f64> {
    Ok(charbonnier_with_grad(sr, gt, eps)?.0)
}

/// Loss plus d(loss)/d(sr).
pub fn charbonnier_with_grad(
    sr: &Array3<f64>,
    gt: &Array3<f64>,
    eps: f64,
) -> Result<(f64, Array3<f64>)> {
    if sr.dim() != gt.dim() {
        return Err(Error::shape(format!(
            "charbonnier between {:?} and {:?}",
            sr.dim(),
            gt.dim()
        )));
    }
    let n = sr.len() as f64;
    let mut grad = Array3::zeros(sr.dim());
    let mut sum = 0.0;
    Zip::from(&mut grad).and(sr).and(gt).for_each(|g, &s, &t| {
        let d = s - t;
        let root = (d * d + eps * eps).sqrt();
        sum += root;
        *g = d / (n * root);
    });
    Ok((sum / n, grad))
}

/// Cosine-annealed learning rate; `iter` outside `[0, total_iters]` clamps.
pub fn lr_schedule(iter: u64, spec: &TrainSpec) -> f64 {
    let frac = iter.min(spec.total_iters) as f64 / spec.total_iters as f64;
    spec.lr_min
        + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adam with bias correction; moments are indexed in parameter-registration
/// order and serialized into checkpoints as `adam.m.*` / `adam.v.*`.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
}

impl Adam {
    pub fn new(ps: &ParamStore, spec: &TrainSpec) -> Self {
        let zeros: Vec<ArrayD<f64>> = ps
            .ids()
            .map(|id| ArrayD::zeros(ps.get(id).raw_dim()))
            .collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1: spec.beta1,
            beta2: spec.beta2,
        }
    }

    pub fn step(&mut self, ps: &mut ParamStore, gs: &GradStore, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = ps.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let g = gs.get(id);
            let (b1, b2) = (self.beta1, self.beta2);
            Zip::from(ps.get_mut(id))
                .and(g)
                .and(&mut self.m[idx])
                .and(&mut self.v[idx])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                });
        }
    }
}

/// One training example: an LR crop, its cropped flows, and the HR
/// reference frame of the matching crop.
pub struct TrainSample {
    pub lr: FrameSequence,
    pub flows: Vec<FlowField>,
    pub hr_ref: Array3<f64>,
}

/// The batch drawn at iteration `k`. Each draw picks a clip, then a crop
/// seed; the same seed positions the frame crop and the flow crop.
pub fn sample_batch(data: &[LabeledClip], spec: &TrainSpec, k: u64) -> Result<Vec<TrainSample>> {
    if data.is_empty() {
        return Err(Error::data("cannot sample a batch from an empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(k + 1);
    let size = spec.lr_patch_size;
    let mut out = Vec::with_capacity(spec.batch_size);
    for _ in 0..spec.batch_size {
        let clip = &data[rng.random_range(0..data.len())];
        let crop_seed = rng.random::<u64>();
        let (lr, hr) = sample_patch_pair(&clip.hr, &clip.lr, size, crop_seed)?;
        let (oy, ox) = sample_patch_origin(clip.lr.height(), clip.lr.width(), size, crop_seed);
        let flows = clip
            .flows
            .iter()
            .map(|f| f.crop(oy, ox, size, size))
            .collect::<Result<Vec<_>>>()?;
        let hr_ref = hr.frames[hr.reference_index()].clone();
        out.push(TrainSample { lr, flows, hr_ref });
    }
    Ok(out)
}

pub struct Trainer {
    pub model: SatVsr,
    pub spec: TrainSpec,
    /// Completed iterations.
    pub iter: u64,
    adam: Adam,
}

impl Trainer {
    pub fn new(model: SatVsr, spec: TrainSpec) -> Result<Self> {
        spec.validate()?;
        if spec.lr_patch_size % model.cfg.patch != 0 {
            return Err(Error::config(format!(
                "lr_patch_size {} is not a multiple of patch {}",
                spec.lr_patch_size, model.cfg.patch
            )));
        }
        let adam = Adam::new(&model.ps, &spec);
        Ok(Trainer { model, spec, iter: 0, adam })
    }

    /// One optimization step: sample a batch, average Charbonnier loss and
    /// gradients over it, apply Adam at the scheduled rate.
    pub fn step(&mut self, data: &[LabeledClip]) -> Result<f64> {
        let k = self.iter;
        let samples = sample_batch(data, &self.spec, k)?;
        let inv_batch = 1.0 / samples.len() as f64;
        let mut gs = GradStore::zeros_like(&self.model.ps);
        let mut loss = 0.0;
        for sample in &samples {
            let trace = self.model.forward_traced(&sample.lr, &sample.flows)?;
            let (l, mut dsr) =
                charbonnier_with_grad(&trace.sr, &sample.hr_ref, self.spec.eps_charbonnier)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { iter: k });
            }
            loss += l;
            dsr.mapv_inplace(|g| g * inv_batch);
            self.model.backward(&mut gs, &sample.lr, &trace, &dsr)?;
        }
        loss *= inv_batch;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter: k });
        }
        self.adam.step(&mut self.model.ps, &gs, lr_schedule(k, &self.spec));
        self.iter += 1;
        Ok(loss)
    }

    /// Runs from the current iteration to `total_iters`, appending one row
    /// per iteration to `loss_log.tsv` and writing a checkpoint every
    /// `checkpoint_every` iterations plus one at the end.
    pub fn run(&mut self, data: &[LabeledClip], out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join("loss_log.tsv");
        let mut log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        if log.metadata()?.len() == 0 {
            writeln!(log, "iter\tlr\tloss\twall_seconds")?;
        }
        let start = Instant::now();
        while self.iter < self.spec.total_iters {
            let k = self.iter;
            let lr = lr_schedule(k, &self.spec);
            let loss = self.step(data)?;
            writeln!(
                log,
                "{k}\t{lr:.17e}\t{loss:.17e}\t{:.3}",
                start.elapsed().as_secs_f64()
            )?;
            let done = self.iter;
            let due = self.spec.checkpoint_every > 0 && done % self.spec.checkpoint_every == 0;
            if due || done == self.spec.total_iters {
                write_checkpoint(&self.checkpoint_path(out_dir, done), &self.checkpoint())?;
            }
        }
        Ok(())
    }

    pub fn checkpoint_path(&self, out_dir: &Path, iter: u64) -> PathBuf {
        out_dir.join(format!("ckpt_{iter:07}.svck"))
    }

    /// Parameters plus optimizer moments, enough to continue bitwise.
    pub fn checkpoint(&self) -> Checkpoint {
        let ps = &self.model.ps;
        let mut tensors: Vec<(String, ArrayD<f64>)> = ps
            .entries()
            .map(|(name, t)| (name.to_string(), t.clone()))
            .collect();
        for (idx, id) in ps.ids().enumerate() {
            let name = ps.name(id);
            tensors.push((format!("adam.m.{name}"), self.adam.m[idx].clone()));
            tensors.push((format!("adam.v.{name}"), self.adam.v[idx].clone()));
        }
        Checkpoint {
            config: self.model.cfg.clone(),
            iteration: self.iter,
            tensors,
        }
    }

    /// Rebuilds a trainer mid-run; requires the checkpoint to carry Adam
    /// moments for every parameter.
    pub fn resume(path: &Path, spec: TrainSpec) -> Result<Trainer> {
        let ckpt = read_checkpoint(path)?;
        let model = model_from_checkpoint(&ckpt)?;
        let mut adam = Adam::new(&model.ps, &spec);
        adam.t = ckpt.iteration;
        let ids: Vec<ParamId> = model.ps.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let name = model.ps.name(id);
            for (which, slot) in [("m", &mut adam.m[idx]), ("v", &mut adam.v[idx])] {
                let key = format!("adam.{which}.{name}");
                let Some(tensor) = ckpt.tensor(&key) else {
                    return Err(Error::data(format!("checkpoint lacks moment `{key}`")));
                };
                if tensor.shape() != slot.shape() {
                    return Err(Error::shape(format!(
                        "moment `{key}`: stored {:?} != parameter {:?}",
                        tensor.shape(),
                        slot.shape()
                    )));
                }
                *slot = tensor.clone();
            }
        }
        let mut trainer = Trainer::new(model, spec)?;
        trainer.adam = adam;
        trainer.iter = ckpt.iteration;
        Ok(trainer)
    }
}

/// Instantiates the checkpoint's model. With a learnable positional bias the
/// input geometry comes from the stored bias shape; otherwise the smallest
/// legal square is used (the weights are geometry-independent).
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<SatVsr> {
    let cfg = ckpt.config.clone();
    let input_hw = match ckpt.tensor("pe.bias") {
        Some(bias) if bias.ndim() == 4 => {
            (bias.shape()[1] * cfg.patch, bias.shape()[2] * cfg.patch)
        }
        Some(_) => return Err(Error::shape("pe.bias must be a 4-d tensor")),
        None => {
            let mut side = cfg.patch;
            while cfg.csna_enabled && side % 8 != 0 {
                side += cfg.patch;
            }
            (side, side)
        }
    };
    let mut model = SatVsr::new(cfg, input_hw, 0)?;
    let mut applied = 0usize;
    for (name, tensor) in &ckpt.tensors {
        if name.starts_with("adam.") {
            continue;
        }
        model.ps.set(name, tensor.clone())?;
        applied += 1;
    }
    if applied != model.ps.len() {
        return Err(Error::data(format!(
            "checkpoint covers {applied} of {} model parameters",
            model.ps.len()
        )));
    }
    Ok(model)
}
