//! Deterministic moving-shapes videos with exact per-pixel object masks.

mod io;

pub use io::{
    generate_split, load_split, make_split, read_pgm, read_ppm, read_sequence, write_pgm, write_ppm, write_sequence,
    SplitOptions,
};

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::IdMask;
use crate::tensor::Tensor;

const MAX_OBJECTS: usize = 4;
const PLACEMENT_TRIES: u64 = 100;
/// Minimum visible pixels per object in frame 0.
const MIN_VISIBLE: usize = 6;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Difficulty {
    Easy,
    FastMotion,
    Clutter,
    Deform,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::FastMotion,
        Difficulty::Clutter,
        Difficulty::Deform,
    ];

    /// Range of object speeds in pixels per frame.
    fn speed(self) -> (f64, f64) {
        match self {
            Difficulty::FastMotion => (2.5, 3.5),
            _ => (0.4, 0.9),
        }
    }

    /// Peak-to-peak contrast of the background texture.
    pub fn texture_contrast(self) -> f64 {
        match self {
            Difficulty::Clutter => 0.8,
            _ => 0.15,
        }
    }

    /// Relative amplitude of the per-axis size oscillation.
    fn morph(self) -> f64 {
        match self {
            Difficulty::Deform => 0.35,
            _ => 0.0,
        }
    }

    /// Maximum rotation rate in radians per frame.
    fn spin(self) -> f64 {
        match self {
            Difficulty::Deform => 0.25,
            _ => 0.08,
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::FastMotion => "fast-motion",
            Difficulty::Clutter => "clutter",
            Difficulty::Deform => "deform",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown difficulty `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    Triangle,
}

/// Trajectory of one object. Positions are in pixels with the frame
/// spanning `[0, h] × [0, w]`; objects bounce off the frame border.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectMotion {
    pub id: u8,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    /// Initial center `(y, x)`.
    pub center: (f64, f64),
    /// Half extents `(a, b)` along the object's local axes.
    pub half_size: (f64, f64),
    /// `(vy, vx)` in pixels per frame.
    pub velocity: (f64, f64),
    pub angle: f64,
    pub rotation_rate: f64,
    /// Multiplicative size change per frame.
    pub scale_drift: f64,
    /// Amplitude and phase of the per-axis size oscillation.
    pub morph: (f64, f64),
    /// Drawing order; larger is nearer the camera.
    pub depth: u32,
}

/// Pose of an object at one frame.
#[derive(Clone, Copy, Debug)]
struct Pose {
    center: (f64, f64),
    half: (f64, f64),
    angle: f64,
}

/// Folds `p` into `[lo, hi]` by reflecting at the ends.
fn bounce(p: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let t = (p - lo).rem_euclid(2.0 * span);
    lo + if t > span { 2.0 * span - t } else { t }
}

impl ObjectMotion {
    fn pose(&self, t: usize, h: usize, w: usize) -> Pose {
        let tf = t as f64;
        let scale = self.scale_drift.powf(tf);
        let wobble = |phase: f64| 1.0 + self.morph.0 * (0.9 * tf + phase).sin();
        let half = (
            self.half_size.0 * scale * wobble(self.morph.1),
            self.half_size.1 * scale * wobble(self.morph.1 + PI / 2.0),
        );
        let margin = 1.0;
        let center = (
            bounce(self.center.0 + self.velocity.0 * tf, margin, h as f64 - margin),
            bounce(self.center.1 + self.velocity.1 * tf, margin, w as f64 - margin),
        );
        Pose {
            center,
            half,
            angle: self.angle + self.rotation_rate * tf,
        }
    }
}

impl Pose {
    fn contains(&self, shape: ShapeKind, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.center.0, x - self.center.1);
        let (s, c) = self.angle.sin_cos();
        // coordinates along the object's local axes
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let (a, b) = self.half;
        match shape {
            ShapeKind::Rectangle => u.abs() <= a && v.abs() <= b,
            ShapeKind::Ellipse => (u / a).powi(2) + (v / b).powi(2) <= 1.0,
            ShapeKind::Triangle => {
                let vert = |k: f64| {
                    let th = -PI / 2.0 + 2.0 * PI * k / 3.0;
                    (a * th.cos(), b * th.sin())
                };
                let (p0, p1, p2) = (vert(0.0), vert(1.0), vert(2.0));
                let side = |p: (f64, f64), q: (f64, f64)| (q.0 - p.0) * (v - p.1) - (q.1 - p.1) * (u - p.0);
                let (s0, s1, s2) = (side(p0, p1), side(p1, p2), side(p2, p0));
                (s0 >= 0.0 && s1 >= 0.0 && s2 >= 0.0) || (s0 <= 0.0 && s1 <= 0.0 && s2 <= 0.0)
            }
        }
    }
}

/// 8-bit RGB image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl Image {
    /// `H×W×3` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.h, self.w, 3],
            self.data.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("image extents")
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Generation parameters shared by every sequence of a split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub h: usize,
    pub w: usize,
    pub n_frames: usize,
    pub n_objects: usize,
    pub difficulty: Difficulty,
    /// Multiplies every motion rate; 0 gives a static scene.
    pub motion_scale: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        GenerateOptions {
            h: 32,
            w: 32,
            n_frames: 8,
            n_objects: 2,
            difficulty: Difficulty::Easy,
            motion_scale: 1.0,
        }
    }
}

/// A rendered sequence. Masks beyond frame 0 are only reachable through
/// [`SequenceRecord::mask`], which counts every such read.
#[derive(Clone, Debug)]
pub struct SequenceRecord {
    pub id: String,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub n_objects: usize,
    pub frames: Vec<Image>,
    pub motion: Vec<ObjectMotion>,
    masks: Vec<IdMask>,
    gt_reads: Arc<AtomicUsize>,
}

impl PartialEq for SequenceRecord {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
            && self.seed == other.seed
            && self.difficulty == other.difficulty
            && self.n_objects == other.n_objects
            && self.frames == other.frames
            && self.motion == other.motion
            && self.masks == other.masks
    }
}

impl SequenceRecord {
    pub fn new(
        id: String,
        seed: u64,
        difficulty: Difficulty,
        frames: Vec<Image>,
        masks: Vec<IdMask>,
        motion: Vec<ObjectMotion>,
    ) -> Result<Self> {
        if frames.len() != masks.len() || frames.is_empty() {
            return Err(Error::contract(format!(
                "{} frames but {} masks",
                frames.len(),
                masks.len()
            )));
        }
        let n_objects = motion.len();
        Ok(SequenceRecord {
            id,
            seed,
            difficulty,
            n_objects,
            frames,
            motion,
            masks,
            gt_reads: Arc::new(AtomicUsize::new(0)),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn h(&self) -> usize {
        self.frames[0].h
    }

    pub fn w(&self) -> usize {
        self.frames[0].w
    }

    /// The given first-frame mask. Not audited.
    pub fn first_mask(&self) -> &IdMask {
        &self.masks[0]
    }

    /// Ground-truth mask of frame `t`. Reads with `t > 0` are counted.
    pub fn mask(&self, t: usize) -> &IdMask {
        if t > 0 {
            self.gt_reads.fetch_add(1, Ordering::Relaxed);
        }
        &self.masks[t]
    }

    /// Number of ground-truth reads beyond frame 0 so far, shared by clones.
    pub fn ground_truth_reads(&self) -> usize {
        self.gt_reads.load(Ordering::Relaxed)
    }

    /// Object ids present in frame 0.
    pub fn object_ids(&self) -> Vec<u8> {
        (1..=self.n_objects as u8).collect()
    }

    pub fn frame_tensors(&self) -> Vec<Tensor> {
        self.frames.iter().map(Image::to_tensor).collect()
    }
}

pub(crate) use crate::seed::mix as derived_seed;

fn hue_color(hue: f64) -> [u8; 3] {
    let h6 = (hue.rem_euclid(1.0)) * 6.0;
    let x = 1.0 - (h6 % 2.0 - 1.0).abs();
    let (r, g, b) = match h6 as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    let lift = |v: f64| (40.0 + 200.0 * v).round() as u8;
    [lift(r), lift(g), lift(b)]
}

/// Static background: a smooth gradient plus sinusoidal texture whose
/// contrast depends on the difficulty.
fn background(rng: &mut ChaCha8Rng, h: usize, w: usize, difficulty: Difficulty) -> Vec<[f64; 3]> {
    let base: [f64; 3] = [
        rng.gen_range(0.25..0.5),
        rng.gen_range(0.25..0.5),
        rng.gen_range(0.25..0.5),
    ];
    let contrast = difficulty.texture_contrast();
    let waves: Vec<(f64, f64, f64, [f64; 3])> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.2..1.2),
                rng.gen_range(0.0..PI),
                rng.gen_range(0.0..2.0 * PI),
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
            )
        })
        .collect();
    (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let mut px = [0.0; 3];
            for (ch, v) in px.iter_mut().enumerate() {
                let mut t = 0.0;
                for &(freq, dir, phase, amp) in &waves {
                    t += amp[ch] * (freq * (x * dir.cos() + y * dir.sin()) + phase).sin();
                }
                *v = (base[ch] + 0.05 * (y / h as f64 - 0.5) + contrast * t / 8.0).clamp(0.0, 1.0);
            }
            px
        })
        .collect()
}

fn sample_objects(rng: &mut ChaCha8Rng, opts: &GenerateOptions) -> Vec<ObjectMotion> {
    let (h, w) = (opts.h as f64, opts.w as f64);
    let d = opts.difficulty;
    let scale = opts.motion_scale;
    let hue0: f64 = rng.gen();
    let mut depths: Vec<u32> = (0..opts.n_objects as u32).collect();
    for i in (1..depths.len()).rev() {
        let j = rng.gen_range(0..=i);
        depths.swap(i, j);
    }
    (0..opts.n_objects)
        .map(|k| {
            let shape = [ShapeKind::Rectangle, ShapeKind::Ellipse, ShapeKind::Triangle][rng.gen_range(0..3)];
            let size = h.min(w);
            let half_size = (rng.gen_range(0.12..0.24) * size, rng.gen_range(0.12..0.24) * size);
            let center = (rng.gen_range(0.25..0.75) * h, rng.gen_range(0.25..0.75) * w);
            let (lo, hi) = d.speed();
            let speed = rng.gen_range(lo..hi) * scale;
            let heading = rng.gen_range(0.0..2.0 * PI);
            ObjectMotion {
                id: k as u8 + 1,
                shape,
                color: hue_color(hue0 + k as f64 / opts.n_objects as f64),
                center,
                half_size,
                velocity: (speed * heading.sin(), speed * heading.cos()),
                angle: rng.gen_range(0.0..PI),
                rotation_rate: rng.gen_range(-d.spin()..d.spin()) * scale,
                scale_drift: 1.0 + rng.gen_range(-0.02..0.02) * scale,
                morph: (d.morph() * scale, rng.gen_range(0.0..2.0 * PI)),
                depth: depths[k],
            }
        })
        .collect()
}

/// Renders frame `t`: supersampled colors and the exact pixel-center mask.
fn render(objects: &[ObjectMotion], bg: &[[f64; 3]], h: usize, w: usize, t: usize) -> (Image, IdMask) {
    let mut order: Vec<(&ObjectMotion, Pose)> = objects.iter().map(|o| (o, o.pose(t, h, w))).collect();
    // nearest first so the first hit wins
    order.sort_by_key(|(o, _)| std::cmp::Reverse(o.depth));
    let hit = |y: f64, x: f64| order.iter().find(|(o, p)| p.contains(o.shape, y, x)).map(|(o, _)| *o);

    let mut data = Vec::with_capacity(h * w * 3);
    let mut ids = Vec::with_capacity(h * w);
    let n_sub = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    for y in 0..h {
        for x in 0..w {
            let bgc = bg[y * w + x];
            let mut acc = [0.0; 3];
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64;
                    let c = match hit(py, px) {
                        Some(o) => o.color.map(|v| v as f64 / 255.0),
                        None => bgc,
                    };
                    for ch in 0..3 {
                        acc[ch] += c[ch];
                    }
                }
            }
            for v in acc {
                data.push((v / n_sub * 255.0).round().clamp(0.0, 255.0) as u8);
            }
            ids.push(hit(y as f64 + 0.5, x as f64 + 0.5).map_or(0, |o| o.id));
        }
    }
    (Image { h, w, data }, IdMask::new(h, w, ids).expect("mask extents"))
}

/// Renders a sequence fully determined by `seed` and `opts`.
pub fn generate_sequence(seed: u64, opts: &GenerateOptions) -> Result<SequenceRecord> {
    if opts.n_objects == 0 || opts.n_objects > MAX_OBJECTS {
        return Err(Error::config(format!(
            "n_objects must be in 1..={MAX_OBJECTS}, got {}",
            opts.n_objects
        )));
    }
    if opts.h == 0 || opts.w == 0 || !opts.h.is_multiple_of(4) || !opts.w.is_multiple_of(4) {
        return Err(Error::config(format!(
            "frame {}×{} is not divisible by 4",
            opts.h, opts.w
        )));
    }
    if opts.n_frames == 0 {
        return Err(Error::config("n_frames must be positive"));
    }
    for attempt in 0..PLACEMENT_TRIES {
        let mut rng = ChaCha8Rng::seed_from_u64(derived_seed(seed, attempt));
        let bg = background(&mut rng, opts.h, opts.w, opts.difficulty);
        let objects = sample_objects(&mut rng, opts);
        let (img0, mask0) = render(&objects, &bg, opts.h, opts.w, 0);
        if (1..=opts.n_objects as u8).any(|id| mask0.count(id) < MIN_VISIBLE) {
            continue;
        }
        let mut frames = vec![img0];
        let mut masks = vec![mask0];
        for t in 1..opts.n_frames {
            let (img, mask) = render(&objects, &bg, opts.h, opts.w, t);
            frames.push(img);
            masks.push(mask);
        }
        return SequenceRecord::new(
            format!("seq-{seed:016x}"),
            seed,
            opts.difficulty,
            frames,
            masks,
            objects,
        );
    }
    Err(Error::Degenerate(format!(
        "could not place {} objects without full overlap after {PLACEMENT_TRIES} tries (seed {seed})",
        opts.n_objects
    )))
}

/// Mean displacement of object centroids between consecutive frames,
/// over objects visible in both frames.
pub fn mean_centroid_displacement(rec: &SequenceRecord) -> Option<f64> {
    let centroid = |m: &IdMask, id: u8| {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..m.h() {
            for x in 0..m.w() {
                if m.get(y, x) == id {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    };
    let (mut total, mut count) = (0.0, 0usize);
    for t in 1..rec.len() {
        for id in rec.object_ids() {
            if let (Some(a), Some(b)) = (centroid(&rec.masks[t - 1], id), centroid(&rec.masks[t], id)) {
                total += ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    (count > 0).then(|| total / count as f64)
}
