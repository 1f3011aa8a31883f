//! The five subcommands, sharing one loaded [`RunConfig`].

use std::fmt;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use satvsr::checkpoint::read_checkpoint;
use satvsr::config::config_hash;
use satvsr::flow::{read_flow_file, write_flow_file, FlowField};
use satvsr::metrics::{run_benchmark, EvalItem, EvalModel, ReportMeta};
use satvsr::train::{model_from_checkpoint, Trainer};
use satvsr::video::io::{
    clip_flow_paths, read_clip, read_labeled_dataset, write_clip, write_frame_png,
    write_fused_dataset, write_synth_dataset,
};
use satvsr::video::synth::{make_fused_set, make_synth_set, LabeledClip};
use satvsr::video::Role;
use satvsr::{AttentionMode, ModelConfig, SatVsr};

use crate::config::RunConfig;
use crate::{Cli, Cmd};

/// Marker for failures the caller can fix; maps to exit code 1.
#[derive(Debug)]
pub struct UserError(pub String);

impl fmt::Display for UserError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UserError(msg.into()))
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())
        .map_err(|e| e.context(UserError("invalid configuration".into())))?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    match cli.cmd {
        Cmd::Dataset { out, synth, src, fuse } => {
            cmd_dataset(&cfg, &out, synth, src.as_deref(), fuse)
        }
        Cmd::Train { data, out, iters, resume } => {
            if let Some(n) = iters {
                cfg.train.total_iters = n;
            }
            cmd_train(&cfg, &data, &out, resume.as_deref())
        }
        Cmd::Eval { data, out, ckpt, baseline } => {
            cmd_eval(&cfg, &data, &out, ckpt.as_deref(), baseline.as_deref())
        }
        Cmd::Ablate { data, out, iters } => {
            if let Some(n) = iters {
                cfg.train.total_iters = n;
            }
            cmd_ablate(&cfg, &data, &out)
        }
        Cmd::Infer { clip, ckpt, out } => cmd_infer(&clip, &ckpt, &out),
    }
}

fn cmd_dataset(
    cfg: &RunConfig,
    out: &Path,
    synth: Option<usize>,
    src: Option<&Path>,
    fuse: bool,
) -> Result<()> {
    let deg = cfg.degradation();
    match (synth, src) {
        (Some(count), None) => {
            if count == 0 {
                return Err(user("--synth needs at least one clip"));
            }
            let spec = cfg.synth_spec();
            if fuse {
                let clips = make_fused_set(count, &spec, &deg, cfg.train.seed)?;
                write_fused_dataset(out, &clips)?;
                println!(
                    "wrote {count} fused clips and fusion_manifest.tsv under {}",
                    out.display()
                );
            } else {
                let clips = make_synth_set(count, &spec, &deg, cfg.train.seed)?;
                write_synth_dataset(out, &clips)?;
                println!("wrote {count} clips under {}", out.display());
            }
        }
        (None, Some(src)) => {
            if fuse {
                return Err(user("--fuse needs --synth sources with known flows"));
            }
            if !src.is_dir() {
                return Err(user(format!(
                    "source directory {} does not exist",
                    src.display()
                )));
            }
            let named = read_labeled_dataset(src, &deg)
                .with_context(|| format!("loading sources from {}", src.display()))?;
            let count = named.len();
            for (name, clip) in named {
                let dir = out.join(&name);
                write_clip(&dir, &clip.hr)?;
                write_clip(&dir.join("lr"), &clip.lr)?;
                for (path, flow) in clip_flow_paths(&dir, clip.flows.len()).iter().zip(&clip.flows)
                {
                    write_flow_file(path, flow)?;
                }
            }
            println!("degraded {count} clips into {}", out.display());
        }
        (Some(_), Some(_)) => return Err(user("pass --synth or --src, not both")),
        (None, None) => return Err(user("pass --synth N or --src DIR")),
    }
    Ok(())
}

fn load_clips(data: &Path, cfg: &RunConfig) -> Result<Vec<(String, LabeledClip)>> {
    if !data.is_dir() {
        return Err(user(format!(
            "dataset directory {} does not exist",
            data.display()
        )));
    }
    read_labeled_dataset(data, &cfg.degradation())
        .with_context(|| format!("loading dataset {}", data.display()))
}

fn cmd_train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let clips: Vec<LabeledClip> = load_clips(data, cfg)?.into_iter().map(|(_, c)| c).collect();
    let mut trainer = match resume {
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(user(format!("checkpoint {} does not exist", ckpt.display())));
            }
            Trainer::resume(ckpt, cfg.train.clone())?
        }
        None => {
            let hw = (cfg.train.lr_patch_size, cfg.train.lr_patch_size);
            let model = SatVsr::new(cfg.model.clone(), hw, cfg.train.seed)?;
            Trainer::new(model, cfg.train.clone())?
        }
    };
    trainer.run(&clips, out)?;
    println!(
        "trained to iteration {} ({} parameters); checkpoints and loss_log.tsv under {}",
        trainer.iter,
        trainer.model.param_count(),
        out.display()
    );
    Ok(())
}

fn eval_items(named: Vec<(String, LabeledClip)>) -> Vec<EvalItem> {
    named
        .into_iter()
        .map(|(clip_id, c)| EvalItem {
            clip_id,
            lr: c.lr,
            flows: c.flows,
            hr: Some(c.hr),
        })
        .collect()
}

fn cmd_eval(
    cfg: &RunConfig,
    data: &Path,
    out: &Path,
    ckpt: Option<&Path>,
    baseline: Option<&str>,
) -> Result<()> {
    let items = eval_items(load_clips(data, cfg)?);
    let network;
    let (model, checkpoint_id, hash) = match (ckpt, baseline) {
        (Some(path), None) => {
            if !path.exists() {
                return Err(user(format!("checkpoint {} does not exist", path.display())));
            }
            let ck = read_checkpoint(path)?;
            let hash = config_hash(&ck.config);
            network = model_from_checkpoint(&ck)?;
            (
                EvalModel::Network(&network),
                path.display().to_string(),
                hash,
            )
        }
        (None, Some(b)) if b == "bicubic" => (
            EvalModel::Bicubic { scale: cfg.model.scale },
            "bicubic".to_string(),
            config_hash(&cfg.model),
        ),
        (None, Some(other)) => return Err(user(format!("unknown baseline `{other}`"))),
        _ => return Err(user("pass exactly one of --ckpt PATH or --baseline bicubic")),
    };
    let meta = ReportMeta {
        checkpoint: checkpoint_id,
        dataset: data.display().to_string(),
        config_hash: hash,
    };
    let report = run_benchmark(&model, &items, meta)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.txt"), report.render_table())?;
    fs::write(out.join("report.json"), report.to_json()?)?;
    print!("{}", report.render_table());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let named = load_clips(data, cfg)?;
    let clips: Vec<LabeledClip> = named.iter().map(|(_, c)| c.clone()).collect();
    let items = eval_items(named);

    let variants = [
        ("base", AttentionMode::Global, false),
        ("base_sat", AttentionMode::Sat, false),
        ("base_sat_cna", AttentionMode::Sat, true),
    ];
    let mut rows = Vec::new();
    for (name, mode, csna) in variants {
        let model_cfg = ModelConfig {
            attention_mode: mode,
            csna_enabled: csna,
            ..cfg.model.clone()
        };
        let hw = (cfg.train.lr_patch_size, cfg.train.lr_patch_size);
        let model = SatVsr::new(model_cfg, hw, cfg.train.seed)?;
        let mut trainer = Trainer::new(model, cfg.train.clone())?;
        trainer.run(&clips, &out.join(name))?;
        let meta = ReportMeta {
            checkpoint: format!("{name}@{}", trainer.iter),
            dataset: data.display().to_string(),
            config_hash: config_hash(&trainer.model.cfg),
        };
        let report = run_benchmark(&EvalModel::Network(&trainer.model), &items, meta)?;
        rows.push((name, mode == AttentionMode::Sat, csna, report));
    }

    let mark = |on: bool| if on { "x" } else { "-" };
    let mut table = String::from("variant       SAT  CSNA  PSNR(dB)  SSIM\n");
    for (name, sat, csna, report) in &rows {
        table.push_str(&format!(
            "{name:<13} {:<4} {:<5} {:<9.2} {:.4}\n",
            mark(*sat),
            mark(*csna),
            report.mean_psnr,
            report.mean_ssim
        ));
    }
    let json = serde_json::to_string_pretty(
        &rows
            .iter()
            .map(|(name, sat, csna, report)| {
                serde_json::json!({
                    "variant": name,
                    "sat": sat,
                    "csna": csna,
                    "mean_psnr": report.mean_psnr,
                    "mean_ssim": report.mean_ssim,
                })
            })
            .collect::<Vec<_>>(),
    )?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.txt"), &table)?;
    fs::write(out.join("ablation.json"), json)?;
    print!("{table}");
    Ok(())
}

fn cmd_infer(clip: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    if !ckpt.exists() {
        return Err(user(format!("checkpoint {} does not exist", ckpt.display())));
    }
    if !clip.is_dir() {
        return Err(user(format!("clip directory {} does not exist", clip.display())));
    }
    let model = model_from_checkpoint(&read_checkpoint(ckpt)?)?;
    let lr = read_clip(clip, Role::Lr)?;
    let paths = clip_flow_paths(clip, lr.t());
    let flows: Vec<FlowField> = if paths.iter().all(|p| p.exists()) {
        paths
            .iter()
            .map(|p| read_flow_file(p))
            .collect::<satvsr::Result<_>>()?
    } else {
        (0..lr.t())
            .map(|_| FlowField::zeros(lr.height(), lr.width()))
            .collect()
    };
    let sr = model.forward(&lr, &flows)?;
    fs::create_dir_all(out)?;
    let path = out.join("sr.png");
    write_frame_png(&path, &sr)?;
    let (h, w, _) = sr.dim();
    println!("wrote {} ({w}x{h})", path.display());
    Ok(())
}
