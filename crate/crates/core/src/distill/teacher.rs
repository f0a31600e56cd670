//! Supervised training of the teacher network.

use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{clip_global_norm, collect_gradients, Adam};
use crate::error::{Error, Result};
use crate::mask::IdMask;
use crate::propagation::{Bound, Checkpoint, Network, NetworkSpec, Propagator};
use crate::seed::mix;
use crate::synthdata::SequenceRecord;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// Length of the learning-rate schedule.
    pub steps: usize,
    /// Peak Adam learning rate; decays along a cosine to 10% of this value.
    pub lr: f64,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Random flips, transposes, channel and label permutations, time reversal.
    pub augment: bool,
    /// Probability of committing the network's own prediction instead of
    /// the ground truth for each training frame.
    pub feedback: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            steps: 3000,
            lr: 3e-3,
            seed: 0,
            clip_norm: 1.0,
            augment: true,
            feedback: 0.5,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("teacher lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.feedback) {
            return Err(Error::config(format!(
                "feedback must lie in [0, 1], got {}",
                self.feedback
            )));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config(format!("clip_norm must be ≥ 0, got {}", self.clip_norm)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = if self.steps == 0 {
            0.0
        } else {
            (step as f64 / self.steps as f64).min(1.0)
        };
        self.lr * (0.1 + 0.9 * 0.5 * (1.0 + (PI * frac).cos()))
    }

    fn describe(&self) -> String {
        format!(
            "steps={} lr={} seed={} clip_norm={} augment={} feedback={}",
            self.steps, self.lr, self.seed, self.clip_norm, self.augment, self.feedback
        )
    }
}

/// Builds the cross-entropy loss of one clip: frame 0 is seeded with its
/// mask, every later frame is predicted and then committed to memory with
/// either its ground-truth mask or, with probability `feedback`, the
/// network's own argmax prediction. Returns the mean per-pixel loss over
/// frames `1..`.
pub fn supervised_loss(
    g: &mut Graph,
    net: &Network,
    bound: &Bound,
    frames: &[Tensor],
    masks: &[IdMask],
    n_objects: usize,
    feedback: f64,
    seed: u64,
) -> Result<Var> {
    if frames.len() < 2 || frames.len() != masks.len() {
        return Err(Error::contract(format!(
            "a training clip needs at least two frames and one mask per frame ({} frames, {} masks)",
            frames.len(),
            masks.len()
        )));
    }
    let mut prop = Propagator::seed(g, &net.spec, bound, &frames[0], &masks[0], n_objects)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut losses = Vec::with_capacity(frames.len() - 1);
    for (frame, gt) in frames.iter().zip(masks).skip(1) {
        let out = prop.step(g, frame)?;
        let rows = g.reshape(out.logits, &[gt.h() * gt.w(), n_objects + 1])?;
        let logp = g.log_softmax_last(rows);
        let targets: Vec<usize> = gt.ids().iter().map(|&v| v as usize).collect();
        losses.push(g.nll(logp, &targets)?);
        if feedback > 0.0 && rng.gen::<f64>() < feedback {
            let pred = IdMask::argmax(g.value(out.logits))?;
            prop.commit(g, &out, &pred)?;
        } else {
            prop.commit(g, &out, gt)?;
        }
    }
    let stacked = g.concat_last(&losses)?;
    Ok(g.mean(stacked))
}

/// A label-preserving transform of a training clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip_y: bool,
    pub flip_x: bool,
    /// Swap the spatial axes; only drawn for square frames.
    pub transpose: bool,
    /// Output colour channel `c` reads input channel `channels[c]`.
    pub channels: [usize; 3],
    /// Object `k` is relabelled `ids[k]`; background stays 0.
    pub ids: [u8; 256],
    pub reverse: bool,
}

impl Augment {
    pub fn identity() -> Self {
        Augment {
            flip_y: false,
            flip_x: false,
            transpose: false,
            channels: [0, 1, 2],
            ids: std::array::from_fn(|k| k as u8),
            reverse: false,
        }
    }

    pub fn sample(seed: u64, n_objects: usize, square: bool) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = [0, 1, 2];
        channels.shuffle(&mut rng);
        let mut perm: Vec<u8> = (1..=n_objects as u8).collect();
        perm.shuffle(&mut rng);
        let mut ids = Augment::identity().ids;
        for (k, &p) in perm.iter().enumerate() {
            ids[k + 1] = p;
        }
        Augment {
            flip_y: rng.gen(),
            flip_x: rng.gen(),
            transpose: square && rng.gen(),
            channels,
            ids,
            reverse: rng.gen(),
        }
    }

    /// Source pixel of output pixel `(y, x)` in an `h×w` frame.
    fn source(&self, y: usize, x: usize, h: usize, w: usize) -> (usize, usize) {
        let (y, x) = if self.transpose { (x, y) } else { (y, x) };
        (
            if self.flip_y { h - 1 - y } else { y },
            if self.flip_x { w - 1 - x } else { x },
        )
    }

    pub fn apply(&self, frames: &[Tensor], masks: &[IdMask]) -> (Vec<Tensor>, Vec<IdMask>) {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        if self.reverse {
            order.reverse();
        }
        let mut out_frames = Vec::with_capacity(frames.len());
        let mut out_masks = Vec::with_capacity(frames.len());
        for t in order {
            let (h, w) = (frames[t].shape()[0], frames[t].shape()[1]);
            let src = frames[t].data();
            out_frames.push(Tensor::from_fn(&[h, w, 3], |i| {
                let (p, c) = (i / 3, i % 3);
                let (sy, sx) = self.source(p / w, p % w, h, w);
                src[(sy * w + sx) * 3 + self.channels[c]]
            }));
            out_masks.push(IdMask::from_fn(h, w, |y, x| {
                let (sy, sx) = self.source(y, x, h, w);
                self.ids[masks[t].get(sy, sx) as usize]
            }));
        }
        (out_frames, out_masks)
    }
}

/// Index of the training sequence used at `step`.
pub fn sequence_for_step(seed: u64, step: usize, n: usize) -> usize {
    (mix(seed, step as u64) % n as u64) as usize
}

/// Adam training state for a teacher network.
#[derive(Clone, Debug)]
pub struct TeacherTrainer {
    pub network: Network,
    pub config: TeacherConfig,
    optimizer: Adam,
    step: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherStep {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

impl TeacherTrainer {
    pub fn new(spec: NetworkSpec, config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let network = Network::init(spec, config.seed)?;
        let optimizer = Adam::new(config.lr, &network.params);
        Ok(TeacherTrainer {
            network,
            config,
            optimizer,
            step: 0,
        })
    }

    /// Continues from a checkpoint written by [`TeacherTrainer::checkpoint`].
    pub fn resume(ckpt: Checkpoint, config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        let step = ckpt
            .meta
            .get("step")
            .ok_or_else(|| Error::NotFound("checkpoint meta `step`".into()))?
            .parse()
            .map_err(|_| Error::config("checkpoint meta `step` is not an integer"))?;
        let optimizer = Adam::load(config.lr, &ckpt.extra, &ckpt.network.params)?;
        Ok(TeacherTrainer {
            network: ckpt.network,
            config,
            optimizer,
            step,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// One Adam update on the sequence chosen for the current step.
    pub fn train_step(&mut self, data: &[SequenceRecord]) -> Result<TeacherStep> {
        if data.is_empty() {
            return Err(Error::contract("empty training set"));
        }
        let start = Instant::now();
        let rec = &data[sequence_for_step(self.config.seed, self.step, data.len())];
        let frames = rec.frame_tensors();
        let masks: Vec<IdMask> = (0..rec.len()).map(|t| rec.mask(t).clone()).collect();
        let (frames, masks) = if self.config.augment {
            let aug = Augment::sample(
                mix(self.config.seed ^ 0x6175_6700, self.step as u64),
                rec.n_objects,
                rec.h() == rec.w(),
            );
            aug.apply(&frames, &masks)
        } else {
            (frames, masks)
        };
        let mut g = Graph::new();
        let bound = self.network.bind(&mut g, true);
        let loss = supervised_loss(
            &mut g,
            &self.network,
            &bound,
            &frames,
            &masks,
            rec.n_objects,
            self.config.feedback,
            mix(self.config.seed ^ 0x6662_6b00, self.step as u64),
        )?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "teacher loss is {value} at step {} on `{}` ({})",
                self.step,
                rec.id,
                self.config.describe()
            )));
        }
        let grads = g.backward(loss)?;
        let mut flat = collect_gradients(&grads, &bound, &self.network.params);
        let grad_norm = if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut flat, self.config.clip_norm)
        } else {
            flat.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
        };
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "teacher gradient norm is {grad_norm} at step {} on `{}` ({})",
                self.step,
                rec.id,
                self.config.describe()
            )));
        }
        self.optimizer.lr = self.config.lr_at(self.step);
        self.optimizer.step(&mut self.network.params, &flat)?;
        let out = TeacherStep {
            step: self.step,
            loss: value,
            grad_norm,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(out)
    }

    /// Network, optimizer state and step counter.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.network.clone());
        ckpt.meta.insert("kind".into(), "teacher".into());
        ckpt.meta.insert("step".into(), self.step.to_string());
        ckpt.meta.insert("seed".into(), self.config.seed.to_string());
        ckpt.meta.insert("lr".into(), format!("{:?}", self.config.lr));
        ckpt.meta.insert("steps".into(), self.config.steps.to_string());
        ckpt.meta
            .insert("clip_norm".into(), format!("{:?}", self.config.clip_norm));
        ckpt.meta.insert("augment".into(), self.config.augment.to_string());
        self.optimizer.save(&mut ckpt.extra, &self.network.params)?;
        Ok(ckpt)
    }
}
