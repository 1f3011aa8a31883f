//! Clip storage: 8-bit PNG frames in `<root>/<clip_id>/im1.png …`, an
//! optional `meta.txt` with the scene boundary, per-frame `.svf` flow files
//! for generated clips, and the fusion manifest.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::config::DegradationSpec;
use crate::flow::{read_flow_file, write_flow_file, FlowField};
use crate::video::synth::{FusedProvenance, LabeledClip};
use crate::video::{make_lr_sequence, FrameSequence, Role};
use crate::{Error, Result};

/// Quantizes to 8 bits and writes a PNG.
pub fn write_frame_png(path: &Path, frame: &Array3<f64>) -> Result<()> {
    let (h, w, _) = frame.dim();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let q = |c: usize| (frame[[y, x, c]] * 255.0).round().clamp(0.0, 255.0) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([q(0), q(1), q(2)]));
        }
    }
    img.save(path)?;
    Ok(())
}

pub fn read_frame_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| {
        f64::from(img.get_pixel(x as u32, y as u32).0[c]) / 255.0
    }))
}

/// Writes `im1.png … imT.png` plus `meta.txt` when the clip carries a scene
/// boundary.
pub fn write_clip(dir: &Path, seq: &FrameSequence) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames.iter().enumerate() {
        write_frame_png(&dir.join(format!("im{}.png", i + 1)), frame)?;
    }
    if let Some(k) = seq.scene_boundary {
        fs::write(dir.join("meta.txt"), format!("scene_boundary={k}\n"))?;
    }
    Ok(())
}

/// Reads a clip directory written by [`write_clip`]. The role is the
/// caller's to declare; pixels do not record it.
pub fn read_clip(dir: &Path, role: Role) -> Result<FrameSequence> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(format!("im{}.png", frames.len() + 1));
        if !path.exists() {
            break;
        }
        frames.push(read_frame_png(&path)?);
    }
    if frames.is_empty() {
        return Err(Error::data(format!("no im1.png under {}", dir.display())));
    }
    let mut boundary = None;
    let meta = dir.join("meta.txt");
    if meta.exists() {
        for line in fs::read_to_string(&meta)?.lines() {
            if let Some(v) = line.strip_prefix("scene_boundary=") {
                boundary = Some(v.trim().parse::<usize>().map_err(|_| {
                    Error::data(format!("bad scene_boundary in {}", meta.display()))
                })?);
            }
        }
    }
    FrameSequence::new(frames, role, boundary)
}

/// Flow file paths for a clip directory, `flow1.svf … flowT.svf`.
pub fn clip_flow_paths(dir: &Path, t: usize) -> Vec<PathBuf> {
    (1..=t).map(|i| dir.join(format!("flow{i}.svf"))).collect()
}

fn write_clip_flows(dir: &Path, flows: &[FlowField]) -> Result<()> {
    for (path, flow) in clip_flow_paths(dir, flows.len()).iter().zip(flows) {
        write_flow_file(path, flow)?;
    }
    Ok(())
}

/// One fused-clip record in `fusion_manifest.tsv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionManifestRow {
    pub clip_id: String,
    pub source_a: String,
    pub source_b: String,
    pub splice_index: usize,
    pub seed: u64,
}

pub fn write_fusion_manifest(path: &Path, rows: &[FusionManifestRow]) -> Result<()> {
    let mut out = String::from("clip_id\tsource_a\tsource_b\tsplice_index\tseed\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.clip_id, r.source_a, r.source_b, r.splice_index, r.seed
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_fusion_manifest(path: &Path) -> Result<Vec<FusionManifestRow>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(Error::data(format!(
                "manifest {} line {}: expected 5 fields, found {}",
                path.display(),
                i + 1,
                f.len()
            )));
        }
        let parse_err =
            |what: &str| Error::data(format!("manifest {} line {}: bad {what}", path.display(), i + 1));
        rows.push(FusionManifestRow {
            clip_id: f[0].to_string(),
            source_a: f[1].to_string(),
            source_b: f[2].to_string(),
            splice_index: f[3].parse().map_err(|_| parse_err("splice_index"))?,
            seed: f[4].parse().map_err(|_| parse_err("seed"))?,
        });
    }
    Ok(rows)
}

fn scene_id(i: usize) -> String {
    format!("clip_{i:04}")
}

fn fused_id(i: usize) -> String {
    format!("fused_{i:04}")
}

/// Writes a set of single-scene clips: HR frames, the degraded `lr/`
/// mirror, and the LR flow files.
pub fn write_synth_dataset(root: &Path, clips: &[LabeledClip]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, clip) in clips.iter().enumerate() {
        let dir = root.join(scene_id(i));
        write_clip(&dir, &clip.hr)?;
        write_clip(&dir.join("lr"), &clip.lr)?;
        write_clip_flows(&dir, &clip.flows)?;
    }
    Ok(())
}

/// Writes a set of fused clips and the tab-separated fusion manifest.
pub fn write_fused_dataset(root: &Path, clips: &[(LabeledClip, FusedProvenance)]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, (clip, prov)) in clips.iter().enumerate() {
        let dir = root.join(fused_id(i));
        write_clip(&dir, &clip.hr)?;
        write_clip(&dir.join("lr"), &clip.lr)?;
        write_clip_flows(&dir, &clip.flows)?;
        rows.push(FusionManifestRow {
            clip_id: fused_id(i),
            source_a: scene_id(prov.source_a),
            source_b: scene_id(prov.source_b),
            splice_index: prov.splice_index,
            seed: prov.seed,
        });
    }
    write_fusion_manifest(&root.join("fusion_manifest.tsv"), &rows)
}

/// Reads one training clip: HR frames, the LR version (the stored `lr/`
/// mirror when present, otherwise degraded on the fly), and per-frame
/// flows. A clip with no flow files at all gets zero flows — the label
/// convention for frames with no known correspondence.
pub fn read_labeled_clip(dir: &Path, deg: &DegradationSpec) -> Result<LabeledClip> {
    let hr = read_clip(dir, Role::Hr)?;
    let lr_dir = dir.join("lr");
    let lr = if lr_dir.join("im1.png").exists() {
        read_clip(&lr_dir, Role::Lr)?
    } else {
        make_lr_sequence(&hr, deg)?
    };
    let paths = clip_flow_paths(dir, hr.t());
    let present = paths.iter().filter(|p| p.exists()).count();
    let flows = if present == 0 {
        (0..hr.t()).map(|_| FlowField::zeros(lr.height(), lr.width())).collect()
    } else if present == hr.t() {
        paths.iter().map(|p| read_flow_file(p)).collect::<Result<Vec<_>>>()?
    } else {
        return Err(Error::data(format!(
            "{}: found {present} of {} flow files",
            dir.display(),
            hr.t()
        )));
    };
    Ok(LabeledClip { hr, lr, flows })
}

/// Loads every clip directory under `root`, sorted by directory name.
pub fn read_labeled_dataset(
    root: &Path,
    deg: &DegradationSpec,
) -> Result<Vec<(String, LabeledClip)>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(root)? {
        let entry = entry?;
        if entry.path().join("im1.png").exists() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::data(format!(
            "no clip directories under {}",
            root.display()
        )));
    }
    names.sort();
    names
        .into_iter()
        .map(|name| read_labeled_clip(&root.join(&name), deg).map(|clip| (name, clip)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::DegradationSpec;
    use crate::video::synth::{make_fused_set, SynthSpec};

    #[test]
    fn frames_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let frame = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| {
            ((y * 31 + x * 17 + c * 5) % 29) as f64 / 28.0
        });
        write_frame_png(&path, &frame).unwrap();
        let back = read_frame_png(&path).unwrap();
        for (a, b) in frame.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn clips_round_trip_with_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![Array3::from_elem((4, 4, 3), 0.25); 5];
        let seq = FrameSequence::new(frames, Role::Hr, Some(2)).unwrap();
        write_clip(dir.path(), &seq).unwrap();
        let back = read_clip(dir.path(), Role::Hr).unwrap();
        assert_eq!(back.t(), 5);
        assert_eq!(back.scene_boundary, Some(2));
        assert!(read_clip(&dir.path().join("missing"), Role::Hr).is_err());
    }

    #[test]
    fn manifests_round_trip_and_reject_malformed_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fusion_manifest.tsv");
        let rows = vec![
            FusionManifestRow {
                clip_id: "fused_0000".into(),
                source_a: "clip_0001".into(),
                source_b: "clip_0002".into(),
                splice_index: 3,
                seed: 7,
            },
            FusionManifestRow {
                clip_id: "fused_0001".into(),
                source_a: "clip_0002".into(),
                source_b: "clip_0000".into(),
                splice_index: 1,
                seed: 7,
            },
        ];
        write_fusion_manifest(&path, &rows).unwrap();
        assert_eq!(read_fusion_manifest(&path).unwrap(), rows);

        std::fs::write(&path, "clip_id\tsource_a\nx\ty\n").unwrap();
        assert!(read_fusion_manifest(&path).is_err());
    }

    #[test]
    fn fused_dataset_is_byte_stable_across_runs() {
        let spec =
            SynthSpec { height: 32, width: 32, max_speed: 2, min_speed: 1, ..SynthSpec::default() };
        let deg = DegradationSpec::default();
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        for d in [&d1, &d2] {
            let set = make_fused_set(3, &spec, &deg, 0).unwrap();
            write_fused_dataset(d.path(), &set).unwrap();
        }
        let m1 = std::fs::read(d1.path().join("fusion_manifest.tsv")).unwrap();
        let m2 = std::fs::read(d2.path().join("fusion_manifest.tsv")).unwrap();
        assert_eq!(m1, m2);
        let p1 = std::fs::read(d1.path().join("fused_0000/im1.png")).unwrap();
        let p2 = std::fs::read(d2.path().join("fused_0000/im1.png")).unwrap();
        assert_eq!(p1, p2);
        assert!(d1.path().join("fused_0002/flow7.svf").exists());
        assert!(d1.path().join("fused_0000/meta.txt").exists());
    }

    #[test]
    fn labeled_datasets_round_trip() {
        use crate::video::synth::make_synth_set;
        let spec =
            SynthSpec { height: 32, width: 32, max_speed: 2, min_speed: 1, ..SynthSpec::default() };
        let deg = DegradationSpec::default();
        let clips = make_synth_set(2, &spec, &deg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_synth_dataset(dir.path(), &clips).unwrap();

        let back = read_labeled_dataset(dir.path(), &deg).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "clip_0000");
        assert_eq!(back[1].0, "clip_0001");
        let clip = &back[0].1;
        assert_eq!(clip.hr.t(), 7);
        assert_eq!((clip.lr.height(), clip.lr.width()), (8, 8));
        assert_eq!(clip.flows.len(), 7);
        for (a, b) in clips[0].flows.iter().zip(&clip.flows) {
            assert_eq!(a.dx(0, 0), b.dx(0, 0));
            assert_eq!(a.dy(0, 0), b.dy(0, 0));
        }
        for (a, b) in clips[0].hr.frames[3].iter().zip(clip.hr.frames[3].iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }

        // No flow files at all → zero flows; a partial set is an error.
        let bare = tempfile::tempdir().unwrap();
        let clip_dir = bare.path().join("clip_0000");
        write_clip(&clip_dir, &clips[0].hr).unwrap();
        let loaded = read_labeled_clip(&clip_dir, &deg).unwrap();
        assert!(loaded.flows.iter().all(|f| f.dx(2, 2) == 0.0 && f.dy(2, 2) == 0.0));
        write_flow_file(&clip_dir.join("flow1.svf"), &clips[0].flows[0]).unwrap();
        assert!(read_labeled_clip(&clip_dir, &deg).is_err());

        assert!(read_labeled_dataset(&bare.path().join("void"), &deg).is_err());
    }
}
