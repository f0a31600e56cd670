//! Plain-text `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::distill::{AttentionLossKind, CkaDenominator, DistillConfig, LossWeights, TeacherConfig};
use crate::error::{Error, Result};
use crate::propagation::NetworkSpec;
use crate::synthdata::SplitOptions;

/// Where evaluation predictions come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalOracle {
    /// Segment with the checkpoint.
    None,
    /// Pass the ground truth through as the prediction.
    GroundTruth,
}

impl FromStr for EvalOracle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EvalOracle::None),
            "ground-truth" => Ok(EvalOracle::GroundTruth),
            other => Err(Error::config(format!("unknown eval oracle `{other}`"))),
        }
    }
}

impl std::fmt::Display for EvalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalOracle::None => "none",
            EvalOracle::GroundTruth => "ground-truth",
        })
    }
}

/// Every setting a command may read. All keys have defaults; a config file
/// overrides any subset and the resolved set is written beside each run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub data_seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_objects: usize,
    pub teacher_spec: String,
    pub teacher_steps: usize,
    /// Length of the teacher's learning-rate schedule.
    pub teacher_decay_steps: usize,
    pub teacher_lr: f64,
    pub clip_norm: f64,
    pub augment: bool,
    pub feedback: f64,
    pub teacher_gate: f64,
    pub teacher_checkpoint: Option<PathBuf>,
    pub student_spec: String,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip of the student; 0 disables clipping.
    pub student_clip_norm: f64,
    pub lambda: f64,
    pub attention_loss: AttentionLossKind,
    pub cka_denominator: CkaDenominator,
    pub max_rows: usize,
    pub batch: usize,
    pub memory_interval: usize,
    pub memory_capacity: usize,
    pub boundary_tol: usize,
    pub eval_split: String,
    pub eval_oracle: EvalOracle,
}

impl Default for RunConfig {
    fn default() -> Self {
        let split = SplitOptions::default();
        let teacher = TeacherConfig::default();
        let distill = DistillConfig::default();
        let spec = NetworkSpec::teacher();
        RunConfig {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            seed: 0,
            data_seed: split.base_seed,
            n_train: split.n_train,
            n_val: split.n_val,
            n_frames: split.n_frames,
            height: split.h,
            width: split.w,
            max_objects: split.max_objects,
            teacher_spec: spec.name.clone(),
            teacher_steps: teacher.steps,
            teacher_decay_steps: teacher.steps,
            teacher_lr: teacher.lr,
            clip_norm: teacher.clip_norm,
            augment: teacher.augment,
            feedback: teacher.feedback,
            teacher_gate: 0.80,
            teacher_checkpoint: None,
            student_spec: NetworkSpec::student().name,
            steps: distill.steps,
            lr: distill.lr,
            momentum: distill.momentum,
            student_clip_norm: distill.clip_norm,
            lambda: distill.weights.lambda,
            attention_loss: distill.attention,
            cka_denominator: distill.denominator,
            max_rows: distill.max_rows,
            batch: distill.batch,
            memory_interval: spec.memory_interval,
            memory_capacity: spec.memory_capacity,
            boundary_tol: crate::eval::BOUNDARY_TOL,
            eval_split: "val".into(),
            eval_oracle: EvalOracle::None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value `{value}` for key `{key}`")))
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    match value {
        "" | "none" => None,
        v => Some(PathBuf::from(v)),
    }
}

impl RunConfig {
    /// Keys in the order they are written.
    pub const KEYS: [&'static str; 34] = [
        "data_root",
        "out_dir",
        "seed",
        "data_seed",
        "n_train",
        "n_val",
        "n_frames",
        "height",
        "width",
        "max_objects",
        "teacher_spec",
        "teacher_steps",
        "teacher_decay_steps",
        "teacher_lr",
        "clip_norm",
        "augment",
        "feedback",
        "teacher_gate",
        "teacher_checkpoint",
        "student_spec",
        "steps",
        "lr",
        "momentum",
        "student_clip_norm",
        "lambda",
        "attention_loss",
        "cka_denominator",
        "max_rows",
        "batch",
        "memory_interval",
        "memory_capacity",
        "boundary_tol",
        "eval_split",
        "eval_oracle",
    ];

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_root" => self.data_root = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse(key, value)?,
            "data_seed" => self.data_seed = parse(key, value)?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "n_frames" => self.n_frames = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "max_objects" => self.max_objects = parse(key, value)?,
            "teacher_spec" => self.teacher_spec = value.to_string(),
            "teacher_steps" => self.teacher_steps = parse(key, value)?,
            "teacher_decay_steps" => self.teacher_decay_steps = parse(key, value)?,
            "teacher_lr" => self.teacher_lr = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "augment" => self.augment = parse(key, value)?,
            "feedback" => self.feedback = parse(key, value)?,
            "teacher_gate" => self.teacher_gate = parse(key, value)?,
            "teacher_checkpoint" => self.teacher_checkpoint = path_or_none(value),
            "student_spec" => self.student_spec = value.to_string(),
            "steps" => self.steps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "student_clip_norm" => self.student_clip_norm = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "attention_loss" => self.attention_loss = value.parse()?,
            "cka_denominator" => self.cka_denominator = value.parse()?,
            "max_rows" => self.max_rows = parse(key, value)?,
            "batch" => self.batch = parse(key, value)?,
            "memory_interval" => self.memory_interval = parse(key, value)?,
            "memory_capacity" => self.memory_capacity = parse(key, value)?,
            "boundary_tol" => self.boundary_tol = parse(key, value)?,
            "eval_split" => match value {
                "train" | "val" => self.eval_split = value.to_string(),
                _ => return Err(Error::config(format!("bad value `{value}` for key `eval_split`"))),
            },
            "eval_oracle" => self.eval_oracle = value.parse()?,
            other => return Err(Error::config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        RunConfig::parse(&text)
    }

    /// Every key with its resolved value; parses back to `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        for key in Self::KEYS {
            let value = match key {
                "data_root" => self.data_root.display().to_string(),
                "out_dir" => self.out_dir.display().to_string(),
                "seed" => self.seed.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "n_train" => self.n_train.to_string(),
                "n_val" => self.n_val.to_string(),
                "n_frames" => self.n_frames.to_string(),
                "height" => self.height.to_string(),
                "width" => self.width.to_string(),
                "max_objects" => self.max_objects.to_string(),
                "teacher_spec" => self.teacher_spec.clone(),
                "teacher_steps" => self.teacher_steps.to_string(),
                "teacher_decay_steps" => self.teacher_decay_steps.to_string(),
                "teacher_lr" => format!("{:?}", self.teacher_lr),
                "clip_norm" => format!("{:?}", self.clip_norm),
                "augment" => self.augment.to_string(),
                "feedback" => format!("{:?}", self.feedback),
                "teacher_gate" => format!("{:?}", self.teacher_gate),
                "teacher_checkpoint" => opt(&self.teacher_checkpoint),
                "student_spec" => self.student_spec.clone(),
                "steps" => self.steps.to_string(),
                "lr" => format!("{:?}", self.lr),
                "momentum" => format!("{:?}", self.momentum),
                "student_clip_norm" => format!("{:?}", self.student_clip_norm),
                "lambda" => format!("{:?}", self.lambda),
                "attention_loss" => self.attention_loss.to_string(),
                "cka_denominator" => self.cka_denominator.to_string(),
                "max_rows" => self.max_rows.to_string(),
                "batch" => self.batch.to_string(),
                "memory_interval" => self.memory_interval.to_string(),
                "memory_capacity" => self.memory_capacity.to_string(),
                "boundary_tol" => self.boundary_tol.to_string(),
                "eval_split" => self.eval_split.clone(),
                "eval_oracle" => self.eval_oracle.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    pub fn split_options(&self) -> SplitOptions {
        SplitOptions {
            n_train: self.n_train,
            n_val: self.n_val,
            base_seed: self.data_seed,
            h: self.height,
            w: self.width,
            n_frames: self.n_frames,
            max_objects: self.max_objects,
        }
    }

    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            steps: self.teacher_decay_steps,
            lr: self.teacher_lr,
            seed: self.seed,
            clip_norm: self.clip_norm,
            augment: self.augment,
            feedback: self.feedback,
        }
    }

    pub fn distill_config(&self) -> Result<DistillConfig> {
        let cfg = DistillConfig {
            steps: self.steps,
            lr: self.lr,
            momentum: self.momentum,
            clip_norm: self.student_clip_norm,
            weights: LossWeights::new(self.lambda)?,
            attention: self.attention_loss,
            denominator: self.cka_denominator,
            seed: self.seed,
            max_rows: self.max_rows,
            batch: self.batch,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Named architecture with this run's memory policy.
    pub fn network_spec(&self, name: &str) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::by_name(name)?;
        self.apply_memory_policy(&mut spec)?;
        Ok(spec)
    }

    pub fn apply_memory_policy(&self, spec: &mut NetworkSpec) -> Result<()> {
        spec.memory_interval = self.memory_interval;
        spec.memory_capacity = self.memory_capacity;
        spec.validate()
    }
}
