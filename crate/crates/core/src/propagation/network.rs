//! Encoder, identity embedding, propagation blocks and decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::memory::Memory;
use super::params::{Bound, ParamStore};
use super::spec::{AttentionKind, NetworkSpec};
use crate::attention::{self, init_reference_grid, offset_param_shapes, OffsetParams};
use crate::error::{Error, Result};
use crate::mask::IdMask;
use crate::tensor::{Activation, ConvSpec, Graph, Tensor, Var};

const LN_EPS: f64 = 1e-5;
/// Additive score bias that removes a key from a softmax row.
const MASKED: f64 = -1e9;

/// The three propagation stages of a block, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    LongTerm,
    ShortTerm,
    SelfProp,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::LongTerm, Stage::ShortTerm, Stage::SelfProp];

    fn tag(self) -> &'static str {
        match self {
            Stage::LongTerm => "lt",
            Stage::ShortTerm => "st",
            Stage::SelfProp => "sf",
        }
    }
}

/// A network spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParamStore,
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn lecun(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

fn stage_is_deformable(kind: AttentionKind, stage: Stage) -> bool {
    kind == AttentionKind::Deformable && stage != Stage::ShortTerm
}

impl Network {
    /// Seeded random initialisation.
    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (c, d) = (spec.width(), spec.id_dim);

        let mut c_prev = 3;
        for (i, &co) in spec.encoder_channels.iter().enumerate() {
            p.insert(format!("enc.{i}.w"), he(&[co, 3, 3, c_prev], 9 * c_prev, &mut rng))?;
            p.insert(format!("enc.{i}.b"), Tensor::zeros(&[co]))?;
            c_prev = co;
        }
        p.insert("ids.table", Tensor::randn(&[spec.n_max + 1, d], 1.0, &mut rng))?;

        let cfg = spec.attention_config();
        for (b, &kind) in spec.blocks.iter().enumerate() {
            for stage in Stage::ALL {
                let pre = format!("blk{b}.{}", stage.tag());
                p.insert(format!("{pre}.ln_g"), Tensor::full(&[c + d], 1.0))?;
                p.insert(format!("{pre}.ln_b"), Tensor::zeros(&[c + d]))?;
                p.insert(format!("{pre}.w_q"), lecun(&[c, c], c, &mut rng))?;
                p.insert(format!("{pre}.w_k"), lecun(&[c, c], c, &mut rng))?;
                p.insert(format!("{pre}.w_v"), lecun(&[c, c], c, &mut rng))?;
                p.insert(format!("{pre}.w_vid"), lecun(&[d, d], d, &mut rng))?;
                p.insert(format!("{pre}.w_u"), lecun(&[c + d, c], c + d, &mut rng))?;
                p.insert(format!("{pre}.w_uid"), lecun(&[c + d, d], c + d, &mut rng))?;
                if stage_is_deformable(kind, stage) {
                    let shapes = offset_param_shapes(&cfg);
                    let fan1 = shapes[0][1] * shapes[0][2] * shapes[0][3];
                    p.insert(format!("{pre}.off1_w"), he(&shapes[0], fan1, &mut rng))?;
                    p.insert(format!("{pre}.off1_b"), Tensor::zeros(&shapes[1]))?;
                    p.insert(format!("{pre}.off2_w"), Tensor::zeros(&shapes[2]))?;
                    p.insert(format!("{pre}.off2_b"), Tensor::zeros(&shapes[3]))?;
                }
            }
        }

        let [d0, d1, d2] = spec.decoder_channels;
        let skip = spec.encoder_channels[0];
        let dec_in = [(c + d, d0), (d0 + skip, d1), (d1 + 3, d2)];
        for (i, &(ci, co)) in dec_in.iter().enumerate() {
            p.insert(format!("dec.{i}.w"), he(&[co, 3, 3, ci], 9 * ci, &mut rng))?;
            p.insert(format!("dec.{i}.b"), Tensor::zeros(&[co]))?;
        }
        p.insert("dec.3.w", lecun(&[spec.n_max + 1, 1, 1, d2], d2, &mut rng))?;
        p.insert("dec.3.b", Tensor::zeros(&[spec.n_max + 1]))?;
        Ok(Network { spec, params: p })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }
}

/// Encoder output: the token-grid features plus the first-stage skip.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `H/4 × W/4 × width`
    pub features: Var,
    /// Output of the first convolution, `H/2 × W/2 × c_0`.
    pub skip: Var,
}

/// Strided 3×3 convolutions with GELU, downsampling by 4.
pub fn encode(g: &mut Graph, spec: &NetworkSpec, p: &Bound, frame: Var) -> Result<Encoded> {
    let (h, w, c) = attention::map_dims(g, frame)?;
    if c != 3 {
        return Err(Error::shape("encode frame", &[h, w, c], &[h, w, 3]));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::config(format!("frame {h}×{w} is not divisible by 4")));
    }
    let mut x = frame;
    let mut skip = None;
    for (i, &stride) in spec.encoder_strides.iter().enumerate() {
        let w_ = p.var(&format!("enc.{i}.w"))?;
        let b_ = p.var(&format!("enc.{i}.b"))?;
        x = g.conv2d(x, w_, Some(b_), ConvSpec::new(3, stride, 1, 1))?;
        x = g.activation(x, Activation::Gelu);
        if i == 0 {
            skip = Some(x);
        }
    }
    Ok(Encoded {
        features: x,
        skip: skip.expect("encoder has at least one stage"),
    })
}

/// Looks up every mask pixel in the id table and area-averages the result
/// down to `target_hw`.
pub fn embed_ids(
    g: &mut Graph,
    spec: &NetworkSpec,
    p: &Bound,
    mask: &IdMask,
    target_hw: (usize, usize),
) -> Result<Var> {
    if let Some(&bad) = mask.ids().iter().find(|&&v| v as usize > spec.n_max) {
        return Err(Error::config(format!("mask id {bad} exceeds n_max {}", spec.n_max)));
    }
    let (th, tw) = target_hw;
    if th == 0 || !mask.h().is_multiple_of(th) || !mask.w().is_multiple_of(tw) || mask.h() / th != mask.w() / tw {
        return Err(Error::shape("embed_ids target", &[mask.h(), mask.w()], &[th, tw]));
    }
    let rows: Vec<usize> = mask.ids().iter().map(|&v| v as usize).collect();
    let table = p.var("ids.table")?;
    let e = g.gather_rows(table, &rows)?;
    let e = g.reshape(e, &[mask.h(), mask.w(), spec.id_dim])?;
    g.avg_pool(e, mask.h() / th)
}

/// Memory contents a stage attends to: pairs of (visual key source,
/// identity source) maps, both on the token grid.
pub type Sources = Vec<(Var, Var)>;

/// What one block leaves behind.
#[derive(Clone, Debug)]
pub struct BlockOutput {
    pub visual: Var,
    pub id: Var,
    /// Normalised visual features of the long-term stage, stored in memory
    /// as this frame's key source.
    pub key_source: Var,
    /// Attention weights per stage (`None` when a stage was skipped).
    pub weights: [Option<Var>; 3],
}

impl BlockOutput {
    /// The self-propagation weights, exposed for distillation.
    pub fn exposed(&self) -> Var {
        self.weights[2].expect("self-propagation always runs")
    }
}

/// 0 inside the `(2r+1)×(2r+1)` token neighbourhood, `MASKED` outside.
fn window_bias(h: usize, w: usize, r: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[n, n], |i| {
        let (q, k) = (i / n, i % n);
        let (qy, qx, ky, kx) = (q / w, q % w, k / w, k % w);
        if qy.abs_diff(ky) <= r && qx.abs_diff(kx) <= r {
            0.0
        } else {
            MASKED
        }
    })
}

struct StageResult {
    visual: Var,
    id: Var,
    z_vis: Var,
    weights: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    g: &mut Graph,
    spec: &NetworkSpec,
    p: &Bound,
    block: usize,
    stage: Stage,
    visual: Var,
    id: Var,
    sources: Option<&[(Var, Var)]>,
) -> Result<StageResult> {
    let (h, w, c) = attention::map_dims(g, visual)?;
    let d = spec.id_dim;
    let n = h * w;
    let pre = format!("blk{block}.{}", stage.tag());
    let pv = |name: &str| p.var(&format!("{pre}.{name}"));

    let x = g.concat_last(&[visual, id])?;
    let x = g.reshape(x, &[n, c + d])?;
    let z = g.layer_norm(x, pv("ln_g")?, pv("ln_b")?, LN_EPS)?;
    let z_vis_t = g.slice_last(z, 0, c)?;
    let z_vis = g.reshape(z_vis_t, &[h, w, c])?;

    let own;
    let sources = match (stage, sources) {
        (Stage::SelfProp, _) => {
            let z_id_t = g.slice_last(z, c, d)?;
            let z_id = g.reshape(z_id_t, &[h, w, d])?;
            own = [(z_vis, z_id)];
            &own[..]
        }
        (_, Some(s)) if !s.is_empty() => s,
        _ => {
            return Ok(StageResult {
                visual,
                id,
                z_vis,
                weights: None,
            })
        }
    };

    let q = g.matmul(z_vis_t, pv("w_q")?)?;
    let deformable = stage_is_deformable(spec.blocks[block], stage);
    let sampled: Vec<(Var, Var)> = if deformable {
        let cfg = spec.attention_config();
        let q_map = g.reshape(q, &[h, w, c])?;
        let off = OffsetParams {
            conv1_w: pv("off1_w")?,
            conv1_b: pv("off1_b")?,
            conv2_w: pv("off2_w")?,
            conv2_b: pv("off2_b")?,
        };
        let delta = attention::offset_network(g, q_map, &off, &cfg)?;
        let grid = init_reference_grid(h, w, cfg.grid_factor)?;
        let mut out = Vec::with_capacity(sources.len());
        for &(kmap, imap) in sources {
            let ks = attention::resample_features(g, kmap, &grid, delta, cfg.groups)?;
            let is = attention::resample_features(g, imap, &grid, delta, cfg.groups)?;
            out.push((ks, is));
        }
        out
    } else {
        sources.to_vec()
    };

    let mut key_rows = Vec::with_capacity(sampled.len());
    let mut id_rows = Vec::with_capacity(sampled.len());
    for (kmap, imap) in sampled {
        key_rows.push(attention::tokens(g, kmap)?);
        id_rows.push(attention::tokens(g, imap)?);
    }
    let kin = if key_rows.len() == 1 {
        key_rows[0]
    } else {
        g.concat_rows(&key_rows)?
    };
    let iin = if id_rows.len() == 1 {
        id_rows[0]
    } else {
        g.concat_rows(&id_rows)?
    };

    let k = g.matmul(kin, pv("w_k")?)?;
    let v = g.matmul(kin, pv("w_v")?)?;
    let v_id = g.matmul(iin, pv("w_vid")?)?;
    let bias = if stage == Stage::ShortTerm {
        let m = g.shape(k)[0];
        if m != n {
            return Err(Error::contract("short-term memory must hold exactly one frame"));
        }
        Some(g.constant(window_bias(h, w, spec.window_radius)))
    } else {
        None
    };
    let (weights, agg_vis) = attention::attend(g, q, k, v, c as f64, bias)?;
    let agg_id = g.matmul(weights, v_id)?;

    let gate_vis = g.matmul(z, pv("w_u")?)?;
    let gate_vis = g.activation(gate_vis, Activation::Silu);
    let gate_id = g.matmul(z, pv("w_uid")?)?;
    let gate_id = g.activation(gate_id, Activation::Silu);
    let upd_vis = g.mul(agg_vis, gate_vis)?;
    let upd_id = g.mul(agg_id, gate_id)?;
    let upd_vis = g.reshape(upd_vis, &[h, w, c])?;
    let upd_id = g.reshape(upd_id, &[h, w, d])?;
    Ok(StageResult {
        visual: g.add(visual, upd_vis)?,
        id: g.add(id, upd_id)?,
        z_vis,
        weights: Some(weights),
    })
}

/// One gated propagation block: long-term, short-term and self stages,
/// each with a residual connection. `long_term` and `short_term` hold
/// this block's memory sources.
pub fn block_forward(
    g: &mut Graph,
    spec: &NetworkSpec,
    p: &Bound,
    block: usize,
    visual: Var,
    id: Var,
    long_term: &[(Var, Var)],
    short_term: Option<(Var, Var)>,
) -> Result<BlockOutput> {
    let st = short_term.map(|s| [s]);
    let lt = run_stage(g, spec, p, block, Stage::LongTerm, visual, id, Some(long_term))?;
    let sh = run_stage(
        g,
        spec,
        p,
        block,
        Stage::ShortTerm,
        lt.visual,
        lt.id,
        st.as_ref().map(|s| &s[..]),
    )?;
    let sf = run_stage(g, spec, p, block, Stage::SelfProp, sh.visual, sh.id, None)?;
    Ok(BlockOutput {
        visual: sf.visual,
        id: sf.id,
        key_source: lt.z_vis,
        weights: [lt.weights, sh.weights, sf.weights],
    })
}

/// Decodes branch outputs into `H×W×(n_objects+1)` logits. Upsamples ×4 in
/// two steps, joining the first encoder stage and then the raw frame.
pub fn decode(
    g: &mut Graph,
    spec: &NetworkSpec,
    p: &Bound,
    visual: Var,
    id: Var,
    enc: &Encoded,
    frame: Var,
    n_objects: usize,
) -> Result<Var> {
    if n_objects == 0 || n_objects > spec.n_max {
        return Err(Error::config(format!(
            "n_objects {n_objects} outside 1..={}",
            spec.n_max
        )));
    }
    let conv = |g: &mut Graph, x: Var, i: usize, k: usize| -> Result<Var> {
        let w = p.var(&format!("dec.{i}.w"))?;
        let b = p.var(&format!("dec.{i}.b"))?;
        g.conv2d(x, w, Some(b), ConvSpec::same(k))
    };
    let x = g.concat_last(&[visual, id])?;
    let x = conv(g, x, 0, 3)?;
    let x = g.activation(x, Activation::Gelu);
    let x = g.upsample(x, 2)?;
    let x = g.concat_last(&[x, enc.skip])?;
    let x = conv(g, x, 1, 3)?;
    let x = g.activation(x, Activation::Gelu);
    let x = g.upsample(x, 2)?;
    let x = g.concat_last(&[x, frame])?;
    let x = conv(g, x, 2, 3)?;
    let x = g.activation(x, Activation::Gelu);
    let logits = conv(g, x, 3, 1)?;
    g.slice_last(logits, 0, n_objects + 1)
}

/// Graph handles produced for one propagated frame.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub index: usize,
    /// `H×W×(n_objects+1)`
    pub logits: Var,
    pub blocks: Vec<BlockOutput>,
    distill_block: usize,
}

impl FrameOutput {
    /// Self-propagation weights of the distillation block.
    pub fn exposed(&self) -> Var {
        self.blocks[self.distill_block - 1].exposed()
    }
}

/// Stateful frame-by-frame propagation over one sequence within one graph.
pub struct Propagator<'a> {
    spec: &'a NetworkSpec,
    params: &'a Bound,
    memory: Memory,
    n_objects: usize,
    next: usize,
    grid: (usize, usize),
}

impl<'a> Propagator<'a> {
    /// Runs frame 0 through the encoder and blocks (no decoding) and stores
    /// it in memory with the given mask.
    pub fn seed(
        g: &mut Graph,
        spec: &'a NetworkSpec,
        params: &'a Bound,
        frame0: &Tensor,
        mask0: &IdMask,
        n_objects: usize,
    ) -> Result<Self> {
        if n_objects == 0 || n_objects > spec.n_max {
            return Err(Error::config(format!(
                "n_objects {n_objects} outside 1..={}",
                spec.n_max
            )));
        }
        let (h, w) = (frame0.shape()[0], frame0.shape()[1]);
        let grid = (h / spec.downsample(), w / spec.downsample());
        let mut prop = Propagator {
            spec,
            params,
            memory: Memory::new(spec.memory_interval, spec.memory_capacity),
            n_objects,
            next: 0,
            grid,
        };
        let out = prop.forward(g, frame0, false)?;
        prop.commit(g, &out, mask0)?;
        Ok(prop)
    }

    /// Propagates the next frame and returns its logits and artifacts.
    /// The frame must be committed before the following one is stepped.
    pub fn step(&mut self, g: &mut Graph, frame: &Tensor) -> Result<FrameOutput> {
        self.forward(g, frame, true)
    }

    fn forward(&mut self, g: &mut Graph, frame: &Tensor, decode_logits: bool) -> Result<FrameOutput> {
        let index = self.next;
        if self.memory.last_frame().is_some_and(|f| f + 1 != index) {
            return Err(Error::contract(format!(
                "frame {} was never committed",
                index.wrapping_sub(1)
            )));
        }
        let fv = g.constant(frame.clone());
        let enc = encode(g, self.spec, self.params, fv)?;
        let (h, w, _) = attention::map_dims(g, enc.features)?;
        if (h, w) != self.grid {
            return Err(Error::shape(
                "frame",
                frame.shape(),
                &[self.grid.0 * 4, self.grid.1 * 4, 3],
            ));
        }
        let mut visual = enc.features;
        let mut id = g.constant(Tensor::zeros(&[h, w, self.spec.id_dim]));
        let mut blocks = Vec::with_capacity(self.spec.blocks.len());
        for b in 0..self.spec.blocks.len() {
            let lt = self.memory.long_term_sources(b);
            let st = self.memory.short_term_source(b);
            let out = block_forward(g, self.spec, self.params, b, visual, id, &lt, st)?;
            visual = out.visual;
            id = out.id;
            blocks.push(out);
        }
        let logits = if decode_logits {
            decode(g, self.spec, self.params, visual, id, &enc, fv, self.n_objects)?
        } else {
            visual
        };
        self.next += 1;
        Ok(FrameOutput {
            index,
            logits,
            blocks,
            distill_block: self.spec.distill_block,
        })
    }

    /// Stores a propagated frame in memory under `mask`.
    pub fn commit(&mut self, g: &mut Graph, out: &FrameOutput, mask: &IdMask) -> Result<()> {
        if mask.max_id() as usize > self.n_objects {
            return Err(Error::config(format!(
                "mask id {} exceeds the sequence's {} objects",
                mask.max_id(),
                self.n_objects
            )));
        }
        let ids = embed_ids(g, self.spec, self.params, mask, self.grid)?;
        let keys = out.blocks.iter().map(|b| b.key_source).collect();
        self.memory.commit(out.index, keys, ids);
        Ok(())
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }
}

/// Result of segmenting a whole sequence.
#[derive(Clone, Debug)]
pub struct Segmentation {
    /// Predicted masks for frames `1..`.
    pub masks: Vec<IdMask>,
    /// Exposed attention map per predicted frame.
    pub attention: Vec<Tensor>,
    /// Logits per predicted frame.
    pub logits: Vec<Tensor>,
}

/// Segments `frames[1..]` given the frame-0 mask, feeding each prediction
/// back into memory.
pub fn segment_sequence(
    net: &Network,
    frames: &[Tensor],
    first_mask: &IdMask,
    n_objects: usize,
) -> Result<Segmentation> {
    if frames.len() < 2 {
        return Err(Error::contract("a sequence needs at least two frames"));
    }
    let mut g = Graph::new();
    let bound = net.bind(&mut g, false);
    let mut prop = Propagator::seed(&mut g, &net.spec, &bound, &frames[0], first_mask, n_objects)?;
    let mut seg = Segmentation {
        masks: Vec::new(),
        attention: Vec::new(),
        logits: Vec::new(),
    };
    for frame in &frames[1..] {
        let out = prop.step(&mut g, frame)?;
        let logits = g.value(out.logits).clone();
        let mask = IdMask::argmax(&logits)?;
        prop.commit(&mut g, &out, &mask)?;
        seg.attention.push(g.value(out.exposed()).clone());
        seg.logits.push(logits);
        seg.masks.push(mask);
    }
    Ok(seg)
}
