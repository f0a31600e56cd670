//! Teacher→student distillation on teacher pseudo-labels.
//!
//! The student sees the frame-0 mask of each sequence and nothing else from
//! the ground truth; every later frame is committed to its memory with the
//! teacher's argmax prediction.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::cka::CkaDenominator;
use super::loss::{attention_loss_var, total_loss, AttentionLossKind, LossWeights};
use super::optim::{clip_global_norm, collect_gradients, Sgd};
use super::pearson::{inter_loss_var, intra_loss_var};
use crate::error::{Error, Result};
use crate::mask::IdMask;
use crate::propagation::{segment_sequence, Bound, Checkpoint, Network, Propagator};
use crate::seed::mix;
use crate::synthdata::SequenceRecord;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub attention: AttentionLossKind,
    pub denominator: CkaDenominator,
    pub seed: u64,
    /// Upper bound on logit rows per step; larger batches are subsampled.
    pub max_rows: usize,
    /// Sequences per step.
    pub batch: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 2000,
            lr: 1e-2,
            momentum: 0.9,
            clip_norm: 5.0,
            weights: LossWeights::default(),
            attention: AttentionLossKind::Cka,
            denominator: CkaDenominator::Standard,
            seed: 0,
            max_rows: 4096,
            batch: 1,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        LossWeights::new(self.weights.lambda)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config(format!("clip_norm must be ≥ 0, got {}", self.clip_norm)));
        }
        if self.max_rows < 2 || self.batch == 0 {
            return Err(Error::config("max_rows must be ≥ 2 and batch ≥ 1"));
        }
        Ok(())
    }

    /// Seed of the logit-row subsample drawn at `step`.
    pub fn rows_seed(&self, step: usize) -> u64 {
        mix(self.seed ^ 0x726f_7773, step as u64)
    }

    /// Training-set indices used at `step`.
    pub fn batch_for_step(&self, step: usize, n: usize) -> Vec<usize> {
        let s = mix(self.seed, step as u64);
        (0..self.batch)
            .map(|k| (mix(s, k as u64) % n as u64) as usize)
            .collect()
    }
}

/// Frozen-teacher outputs for one sequence.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    /// Per-pixel class probabilities, `(H·W)×(N+1)` per frame `1..`.
    pub probs: Vec<Tensor>,
    /// Exposed attention map per frame `1..`.
    pub attention: Vec<Tensor>,
    /// Argmax pseudo-labels per frame `1..`.
    pub masks: Vec<IdMask>,
}

fn softmax_rows(t: &Tensor, cols: usize) -> Result<Tensor> {
    let rows = t.len() / cols;
    let mut out = t.clone().reshape(&[rows, cols])?;
    for r in out.data_mut().chunks_mut(cols) {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        r.iter_mut().for_each(|v| *v /= s);
    }
    Ok(out)
}

/// Runs the teacher from the frame-0 mask alone.
pub fn teacher_targets(teacher: &Network, rec: &SequenceRecord) -> Result<TeacherTargets> {
    let seg = segment_sequence(teacher, &rec.frame_tensors(), rec.first_mask(), rec.n_objects)?;
    let probs = seg
        .logits
        .iter()
        .map(|l| softmax_rows(l, rec.n_objects + 1))
        .collect::<Result<_>>()?;
    Ok(TeacherTargets {
        probs,
        attention: seg.attention,
        masks: seg.masks,
    })
}

/// Loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub inter: f64,
    pub intra: f64,
    pub att: f64,
    pub total: f64,
}

/// Graph handles of the distillation objective.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub inter: Var,
    pub intra: Var,
    pub att: Var,
    pub total: Var,
}

impl LossVars {
    pub fn values(&self, g: &Graph) -> LossComponents {
        LossComponents {
            inter: g.scalar(self.inter),
            intra: g.scalar(self.intra),
            att: g.scalar(self.att),
            total: g.scalar(self.total),
        }
    }
}

/// Builds the distillation objective of one sequence for the student bound
/// in `bound`. `rows_seed` fixes the logit-row subsample.
pub fn sequence_objective(
    g: &mut Graph,
    student: &Network,
    bound: &Bound,
    rec: &SequenceRecord,
    targets: &TeacherTargets,
    cfg: &DistillConfig,
    rows_seed: u64,
) -> Result<LossVars> {
    let frames = rec.frame_tensors();
    if targets.masks.len() + 1 != frames.len() {
        return Err(Error::contract("teacher targets do not match the sequence length"));
    }
    let cols = rec.n_objects + 1;
    let mut prop = Propagator::seed(g, &student.spec, bound, &frames[0], rec.first_mask(), rec.n_objects)?;
    let mut student_rows = Vec::with_capacity(targets.masks.len());
    let mut att_terms = Vec::with_capacity(targets.masks.len());
    for (k, frame) in frames.iter().enumerate().skip(1) {
        let out = prop.step(g, frame)?;
        let exposed = out.exposed();
        let ta = &targets.attention[k - 1];
        if g.shape(exposed) != ta.shape() {
            return Err(Error::shape("teacher/student token grid", ta.shape(), g.shape(exposed)));
        }
        let ta = g.constant(ta.clone());
        att_terms.push(attention_loss_var(g, ta, exposed, cfg.attention, cfg.denominator)?);
        let n_px = g.value(out.logits).len() / cols;
        let rows = g.reshape(out.logits, &[n_px, cols])?;
        student_rows.push(g.softmax_last(rows, 1.0)?);
        prop.commit(g, &out, &targets.masks[k - 1])?;
    }

    let ys = g.concat_rows(&student_rows)?;
    let total_rows = g.shape(ys)[0];
    let mut yt = Tensor::new(
        vec![total_rows, cols],
        targets.probs.iter().flat_map(|p| p.data().iter().copied()).collect(),
    )?;
    let ys = if total_rows > cfg.max_rows {
        let mut rng = ChaCha8Rng::seed_from_u64(rows_seed);
        let mut idx = sample(&mut rng, total_rows, cfg.max_rows).into_vec();
        idx.sort_unstable();
        yt = Tensor::from_fn(&[idx.len(), cols], |i| yt.data()[idx[i / cols] * cols + i % cols]);
        g.gather_rows(ys, &idx)?
    } else {
        ys
    };
    let yt = g.constant(yt);
    let (inter, _) = inter_loss_var(g, ys, yt)?;
    let (intra, _) = intra_loss_var(g, ys, yt)?;
    let att = g.concat_last(&att_terms)?;
    let att = g.mean(att);
    let logit = g.add(inter, intra)?;
    let weighted = g.scale(att, cfg.weights.lambda);
    let total = g.add(logit, weighted)?;
    Ok(LossVars {
        inter,
        intra,
        att,
        total,
    })
}

/// Mean of the per-sequence objectives over a batch.
fn batch_objective(
    g: &mut Graph,
    student: &Network,
    bound: &Bound,
    batch: &[(&SequenceRecord, &TeacherTargets)],
    cfg: &DistillConfig,
    rows_seed: u64,
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(Error::contract("empty distillation batch"));
    }
    let parts = batch
        .iter()
        .enumerate()
        .map(|(k, (rec, tgt))| sequence_objective(g, student, bound, rec, tgt, cfg, mix(rows_seed, k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let mut avg = |pick: fn(&LossVars) -> Var| -> Result<Var> {
        let vs: Vec<Var> = parts.iter().map(pick).collect();
        let c = g.concat_last(&vs)?;
        Ok(g.mean(c))
    };
    Ok(LossVars {
        inter: avg(|l| l.inter)?,
        intra: avg(|l| l.intra)?,
        att: avg(|l| l.att)?,
        total: avg(|l| l.total)?,
    })
}

/// Evaluates the distillation loss of `student` on a batch without updating it.
pub fn distill_loss(
    student: &Network,
    batch: &[(&SequenceRecord, &TeacherTargets)],
    cfg: &DistillConfig,
    rows_seed: u64,
) -> Result<LossComponents> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, false);
    Ok(batch_objective(&mut g, student, &bound, batch, cfg, rows_seed)?.values(&g))
}

/// One SGD-with-momentum update of `student` (after optional gradient
/// clipping); returns the loss before the update.
pub fn distill_step(
    student: &mut Network,
    optimizer: &mut Sgd,
    batch: &[(&SequenceRecord, &TeacherTargets)],
    cfg: &DistillConfig,
    rows_seed: u64,
) -> Result<LossComponents> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let vars = batch_objective(&mut g, student, &bound, batch, cfg, rows_seed)?;
    let values = vars.values(&g);
    if !values.total.is_finite() {
        return Err(Error::Numeric(format!("distillation loss is {}", values.total)));
    }
    debug_assert!((values.total - total_loss(values.inter, values.intra, values.att, cfg.weights)).abs() < 1e-9);
    let grads = g.backward(vars.total)?;
    let mut flat = collect_gradients(&grads, &bound, &student.params);
    if cfg.clip_norm > 0.0 {
        clip_global_norm(&mut flat, cfg.clip_norm);
    }
    optimizer.step(&mut student.params, &flat)?;
    Ok(values)
}

/// One logged distillation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillStep {
    pub step: usize,
    pub loss: LossComponents,
    pub wall_ms: f64,
}

impl DistillStep {
    pub const CSV_HEADER: &'static str = "step,L_inter,L_intra,L_att,L_total,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:.3}",
            self.step, self.loss.inter, self.loss.intra, self.loss.att, self.loss.total, self.wall_ms
        )
    }
}

/// Distillation state: a frozen teacher, the student and its optimizer, and
/// a cache of teacher outputs keyed by training-set index.
pub struct Distiller<'t> {
    teacher: &'t Network,
    pub student: Network,
    pub config: DistillConfig,
    optimizer: Sgd,
    step: usize,
    cache: BTreeMap<usize, TeacherTargets>,
}

impl<'t> Distiller<'t> {
    pub fn new(teacher: &'t Network, student: Network, config: DistillConfig) -> Result<Self> {
        config.validate()?;
        if teacher.spec.downsample() != student.spec.downsample() {
            return Err(Error::config(format!(
                "teacher and student token grids differ (downsample {} vs {})",
                teacher.spec.downsample(),
                student.spec.downsample()
            )));
        }
        let optimizer = Sgd::new(config.lr, config.momentum, &student.params);
        Ok(Distiller {
            teacher,
            student,
            config,
            optimizer,
            step: 0,
            cache: BTreeMap::new(),
        })
    }

    /// Continues from a checkpoint written by [`Distiller::checkpoint`].
    pub fn resume(teacher: &'t Network, ckpt: Checkpoint, config: DistillConfig) -> Result<Self> {
        let step = ckpt
            .meta
            .get("step")
            .ok_or_else(|| Error::NotFound("checkpoint meta `step`".into()))?
            .parse()
            .map_err(|_| Error::config("checkpoint meta `step` is not an integer"))?;
        let optimizer = Sgd::load(config.lr, config.momentum, &ckpt.extra, &ckpt.network.params)?;
        let mut d = Distiller::new(teacher, ckpt.network, config)?;
        d.optimizer = optimizer;
        d.step = step;
        Ok(d)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Computes (in parallel) and caches teacher targets for `indices`.
    pub fn prepare(&mut self, data: &[SequenceRecord], indices: &[usize]) -> Result<()> {
        let mut todo: Vec<usize> = indices
            .iter()
            .copied()
            .filter(|i| !self.cache.contains_key(i))
            .collect();
        todo.sort_unstable();
        todo.dedup();
        let teacher = self.teacher;
        let computed = todo
            .par_iter()
            .map(|&i| teacher_targets(teacher, &data[i]).map(|t| (i, t)))
            .collect::<Result<Vec<_>>>()?;
        self.cache.extend(computed);
        Ok(())
    }

    pub fn targets(&self, index: usize) -> Option<&TeacherTargets> {
        self.cache.get(&index)
    }

    /// Loss of the current student on the given training indices.
    pub fn evaluate(&mut self, data: &[SequenceRecord], indices: &[usize], rows_seed: u64) -> Result<LossComponents> {
        self.prepare(data, indices)?;
        let batch: Vec<_> = indices.iter().map(|&i| (&data[i], &self.cache[&i])).collect();
        distill_loss(&self.student, &batch, &self.config, rows_seed)
    }

    pub fn train_step(&mut self, data: &[SequenceRecord]) -> Result<DistillStep> {
        if data.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let start = Instant::now();
        let indices = self.config.batch_for_step(self.step, data.len());
        self.prepare(data, &indices)?;
        let batch: Vec<_> = indices.iter().map(|&i| (&data[i], &self.cache[&i])).collect();
        let rows_seed = self.config.rows_seed(self.step);
        let loss = distill_step(&mut self.student, &mut self.optimizer, &batch, &self.config, rows_seed)?;
        let out = DistillStep {
            step: self.step,
            loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(out)
    }

    /// Student network, optimizer state and step counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.student.clone());
        let c = &self.config;
        ckpt.meta.insert("kind".into(), "student".into());
        ckpt.meta.insert("step".into(), self.step.to_string());
        ckpt.meta.insert("seed".into(), c.seed.to_string());
        ckpt.meta.insert("lr".into(), format!("{:?}", c.lr));
        ckpt.meta.insert("momentum".into(), format!("{:?}", c.momentum));
        ckpt.meta.insert("clip_norm".into(), format!("{:?}", c.clip_norm));
        ckpt.meta.insert("lambda".into(), format!("{:?}", c.weights.lambda));
        ckpt.meta.insert("attention_loss".into(), c.attention.to_string());
        ckpt.meta.insert("cka_denominator".into(), c.denominator.to_string());
        ckpt.meta.insert("max_rows".into(), c.max_rows.to_string());
        ckpt.meta.insert("batch".into(), c.batch.to_string());
        self.optimizer.save(&mut ckpt.extra, &self.student.params)?;
        Ok(ckpt)
    }
}
