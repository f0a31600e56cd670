//! Batch commands behind the `defattn` binary.
//!
//! Each command reads a [`RunConfig`], writes the resolved configuration
//! beside its outputs and returns a summary. Exit-code mapping lives in
//! [`exit_code`].

mod config;

pub use config::{EvalOracle, RunConfig};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::distill::{DistillStep, Distiller, TeacherTrainer};
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_ground_truth, EvalReport};
use crate::propagation::{segment_sequence, AttentionKind, Checkpoint, Network};
use crate::synthdata::{load_split, make_split, read_sequence, write_ppm, Image, SequenceRecord};
use crate::tensor::Tensor;

/// Process exit code for a command result: 0 success, 2 configuration
/// error, 3 runtime or numeric failure.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_resolved(cfg: &RunConfig, dir: &Path, command: &str) -> Result<PathBuf> {
    create_dir(dir)?;
    let path = dir.join(format!("{command}.config"));
    fs::write(&path, cfg.to_text())?;
    Ok(path)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn meta_f64(ckpt: &Checkpoint, key: &str) -> Option<f64> {
    ckpt.meta.get(key).and_then(|v| v.parse().ok())
}

fn record_scores(ckpt: &mut Checkpoint, report: &EvalReport) {
    ckpt.meta.insert("val_J".into(), format!("{:?}", report.global.j));
    ckpt.meta.insert("val_F".into(), format!("{:?}", report.global.f));
    ckpt.meta.insert("val_JF".into(), format!("{:?}", report.global.jf));
}

/// Loads a checkpoint and applies the run's memory policy to its network.
pub fn load_network(cfg: &RunConfig, path: &Path) -> Result<(Network, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let mut net = ckpt.network.clone();
    cfg.apply_memory_policy(&mut net.spec)?;
    Ok((net, ckpt))
}

/// Generates the train and val splits under `data_root`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let opts = cfg.split_options();
    opts.validate()?;
    let dirs = make_split(&cfg.data_root, &opts)?;
    write_resolved(cfg, &cfg.data_root, "gen-data")?;
    Ok(dirs)
}

#[derive(Clone, Debug)]
pub struct TeacherSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub val: EvalReport,
    pub gate_passed: bool,
}

/// Trains the teacher (optionally resuming from `resume`) up to
/// `teacher_steps` total steps, then scores it on the validation split.
pub fn cmd_train_teacher(cfg: &RunConfig, resume: Option<&Path>) -> Result<TeacherSummary> {
    let tcfg = cfg.teacher_config();
    tcfg.validate()?;
    let spec = cfg.network_spec(&cfg.teacher_spec)?;
    let train = load_split(&cfg.data_root, "train")?;
    let val = load_split(&cfg.data_root, "val")?;
    write_resolved(cfg, &cfg.out_dir, "train-teacher")?;

    let mut trainer = match resume {
        Some(path) => {
            let (net, mut ckpt) = load_network(cfg, path)?;
            ckpt.network = net;
            TeacherTrainer::resume(ckpt, tcfg)?
        }
        None => TeacherTrainer::new(spec, tcfg)?,
    };
    let log = cfg.out_dir.join("teacher_log.csv");
    let mut csv = fs::File::create(&log)?;
    writeln!(csv, "step,loss,grad_norm,wall_ms")?;
    while trainer.step() < cfg.teacher_steps {
        let s = trainer.train_step(&train)?;
        writeln!(csv, "{},{:?},{:?},{:.3}", s.step, s.loss, s.grad_norm, s.wall_ms)?;
        if (s.step + 1) % 100 == 0 {
            eprintln!("teacher step {} loss {:.4}", s.step + 1, s.loss);
        }
    }
    drop(csv);

    let report = evaluate(&trainer.network, &val, cfg.boundary_tol)?;
    let mut ckpt = trainer.checkpoint()?;
    record_scores(&mut ckpt, &report);
    let path = cfg.out_dir.join("teacher.ckpt");
    ckpt.save(&path)?;
    write_json(&cfg.out_dir.join("teacher_eval.json"), &report)?;
    Ok(TeacherSummary {
        checkpoint: path,
        log,
        gate_passed: report.global.jf >= cfg.teacher_gate,
        val: report,
    })
}

#[derive(Clone, Debug)]
pub struct DistillSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub steps: Vec<DistillStep>,
    pub val: EvalReport,
}

/// Distils a fresh student from the teacher at `teacher` (or the config's
/// `teacher_checkpoint`) on the training split.
pub fn cmd_distill(cfg: &RunConfig, teacher: Option<&Path>) -> Result<DistillSummary> {
    let dcfg = cfg.distill_config()?;
    let teacher_path = teacher
        .map(Path::to_path_buf)
        .or_else(|| cfg.teacher_checkpoint.clone())
        .ok_or_else(|| Error::config("distill needs --checkpoint or `teacher_checkpoint`"))?;
    let spec = cfg.network_spec(&cfg.student_spec)?;
    let (teacher_net, ckpt) = load_network(cfg, &teacher_path)?;
    if cfg.teacher_gate > 0.0 {
        match meta_f64(&ckpt, "val_JF") {
            Some(jf) if jf >= cfg.teacher_gate => {}
            Some(jf) => {
                return Err(Error::contract(format!(
                    "teacher validation J&F {jf:.4} is below the gate {}",
                    cfg.teacher_gate
                )))
            }
            None => return Err(Error::contract("teacher checkpoint carries no validation score")),
        }
    }
    let train = load_split(&cfg.data_root, "train")?;
    let val = load_split(&cfg.data_root, "val")?;
    write_resolved(cfg, &cfg.out_dir, "distill")?;

    let student = Network::init(spec, cfg.seed)?;
    let mut distiller = Distiller::new(&teacher_net, student, dcfg)?;
    let log = cfg.out_dir.join("distill_log.csv");
    let mut csv = fs::File::create(&log)?;
    writeln!(csv, "{}", DistillStep::CSV_HEADER)?;
    let mut steps = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let s = distiller.train_step(&train)?;
        writeln!(csv, "{}", s.csv_row())?;
        if (s.step + 1) % 50 == 0 {
            eprintln!("distill step {} loss {:.4}", s.step + 1, s.loss.total);
        }
        steps.push(s);
    }
    drop(csv);

    let report = evaluate(&distiller.student, &val, cfg.boundary_tol)?;
    let mut out = distiller.checkpoint()?;
    record_scores(&mut out, &report);
    out.meta.insert("teacher".into(), teacher_path.display().to_string());
    let path = cfg.out_dir.join("student.ckpt");
    out.save(&path)?;
    write_json(&cfg.out_dir.join("student_eval.json"), &report)?;
    Ok(DistillSummary {
        checkpoint: path,
        log,
        steps,
        val: report,
    })
}

/// Scores a checkpoint (or the ground-truth oracle) on `eval_split` and
/// writes `eval.json`.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let records = load_split(&cfg.data_root, &cfg.eval_split)?;
    let report = match (cfg.eval_oracle, checkpoint) {
        (EvalOracle::GroundTruth, _) => evaluate_ground_truth(&records, cfg.boundary_tol)?,
        (EvalOracle::None, Some(path)) => {
            let (net, _) = load_network(cfg, path)?;
            evaluate(&net, &records, cfg.boundary_tol)?
        }
        (EvalOracle::None, None) => return Err(Error::config("eval needs --checkpoint")),
    };
    write_resolved(cfg, &cfg.out_dir, "eval")?;
    write_json(&cfg.out_dir.join("eval.json"), &report)?;
    Ok(report)
}

/// One attention keypoint: a key location whose max-over-queries weight is
/// at least 0.85 of the frame's maximum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub frame: usize,
    pub y: usize,
    pub x: usize,
    pub score: f64,
}

/// Fraction of the per-frame maximum a keypoint must reach.
pub const KEYPOINT_FRACTION: f64 = 0.85;

/// Max over queries of a `queries × keys` attention matrix.
pub fn key_saliency(attention: &Tensor) -> Result<Vec<f64>> {
    let &[_, k] = attention.shape() else {
        return Err(Error::shape("attention map", attention.shape(), &[0, 0]));
    };
    let mut out = vec![f64::NEG_INFINITY; k];
    for row in attention.data().chunks(k) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

/// Saliency scaled linearly so the maximum maps to 255.
pub fn heatmap(saliency: &[f64]) -> Vec<u8> {
    let max = saliency.iter().cloned().fold(0.0, f64::max);
    saliency
        .iter()
        .map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn keypoints(saliency: &[f64], width: usize, frame: usize) -> Vec<Keypoint> {
    let max = saliency.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    saliency
        .iter()
        .enumerate()
        .filter(|&(_, &v)| v >= KEYPOINT_FRACTION * max)
        .map(|(i, &score)| Keypoint {
            frame,
            y: i / width,
            x: i % width,
            score,
        })
        .collect()
}

fn pgm_bytes(h: usize, w: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

fn find_sequence(cfg: &RunConfig, id: &str) -> Result<SequenceRecord> {
    for split in ["train", "val"] {
        let dir = cfg.data_root.join(split).join(id);
        if dir.is_dir() {
            return read_sequence(&dir);
        }
    }
    Err(Error::NotFound(format!(
        "sequence `{id}` under {}",
        cfg.data_root.display()
    )))
}

#[derive(Clone, Debug)]
pub struct VizSummary {
    pub dir: PathBuf,
    pub heatmaps: Vec<PathBuf>,
    pub keypoints: Vec<Keypoint>,
    /// Key-grid height and width of the heatmaps.
    pub grid: (usize, usize),
}

/// Writes per-frame attention heatmaps, keypoint overlays and a keypoint CSV
/// for one sequence.
pub fn cmd_viz_attn(cfg: &RunConfig, checkpoint: &Path, seq: &str) -> Result<VizSummary> {
    let (net, _) = load_network(cfg, checkpoint)?;
    let rec = find_sequence(cfg, seq)?;
    let seg = segment_sequence(&net, &rec.frame_tensors(), rec.first_mask(), rec.n_objects)?;
    let ds = net.spec.downsample();
    let (th, tw) = (rec.h() / ds, rec.w() / ds);
    let grid = match net.spec.blocks[net.spec.distill_block - 1] {
        AttentionKind::Vanilla => (th, tw),
        AttentionKind::Deformable => (th / net.spec.grid_factor, tw / net.spec.grid_factor),
    };
    let dir = cfg.out_dir.join("viz").join(seq);
    write_resolved(cfg, &dir, "viz-attn")?;
    let mut heatmaps = Vec::new();
    let mut all = Vec::new();
    for (k, att) in seg.attention.iter().enumerate() {
        let frame = k + 1;
        let sal = key_saliency(att)?;
        if sal.len() != grid.0 * grid.1 {
            return Err(Error::shape("attention keys", &[sal.len()], &[grid.0 * grid.1]));
        }
        let path = dir.join(format!("attn_{frame:03}.pgm"));
        fs::write(&path, pgm_bytes(grid.0, grid.1, &heatmap(&sal)))?;
        heatmaps.push(path);
        let kps = keypoints(&sal, grid.1, frame);
        fs::write(
            dir.join(format!("overlay_{frame:03}.ppm")),
            write_ppm(&overlay(&rec.frames[frame], &kps, grid)),
        )?;
        all.extend(kps);
    }
    let mut csv = String::from("frame,y,x,score\n");
    for kp in &all {
        csv += &format!("{},{},{},{:?}\n", kp.frame, kp.y, kp.x, kp.score);
    }
    fs::write(dir.join("keypoints.csv"), csv)?;
    Ok(VizSummary {
        dir,
        heatmaps,
        keypoints: all,
        grid,
    })
}

/// Marks the image cell under each keypoint in red.
fn overlay(frame: &Image, kps: &[Keypoint], grid: (usize, usize)) -> Image {
    let mut img = frame.clone();
    let (ch, cw) = (frame.h / grid.0, frame.w / grid.1);
    for kp in kps {
        for y in kp.y * ch..(kp.y + 1) * ch {
            for x in kp.x * cw..(kp.x + 1) * cw {
                let on_edge = y == kp.y * ch || y + 1 == (kp.y + 1) * ch || x == kp.x * cw || x + 1 == (kp.x + 1) * cw;
                if on_edge {
                    let i = (y * img.w + x) * 3;
                    img.data[i..i + 3].copy_from_slice(&[255, 0, 0]);
                }
            }
        }
    }
    img
}
