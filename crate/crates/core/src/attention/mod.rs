//! Single-head vanilla attention and gated deformable attention.
//!
//! Feature maps are `H×W×C` tensors; projections are plain `C_in×C_out`
//! matrices applied to the `(H·W)×C_in` token view. Deformable attention
//! gathers its keys and values at `reference + offset` locations produced
//! by a small grouped-convolution offset network run on the queries.

pub mod grid;

pub use grid::{bilinear_kernel, init_reference_grid, OffsetField, ReferenceGrid};

use crate::error::{Error, Result};
use crate::tensor::{Activation, ConvSpec, Graph, Var};

/// Channel and grid configuration of one attention unit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub c_in: usize,
    pub c_q: usize,
    pub c_v: usize,
    pub c_u: usize,
    /// Softmax temperature is `sqrt(d)`.
    pub d: f64,
    /// Number of offset groups.
    pub groups: usize,
    pub grid_factor: usize,
    pub offset_kernel: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            c_in: 32,
            c_q: 32,
            c_v: 32,
            c_u: 32,
            d: 32.0,
            groups: 4,
            grid_factor: 1,
            offset_kernel: 5,
        }
    }
}

impl AttentionConfig {
    /// Square config with every channel count equal to `c`.
    pub fn uniform(c: usize, groups: usize, grid_factor: usize) -> Self {
        AttentionConfig {
            c_in: c,
            c_q: c,
            c_v: c,
            c_u: c,
            d: c as f64,
            groups,
            grid_factor,
            offset_kernel: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.c_q.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "c_q {} not divisible by {} offset groups",
                self.c_q, self.groups
            )));
        }
        if !self.c_in.is_multiple_of(self.groups) {
            return Err(Error::config(format!(
                "c_in {} not divisible by {} offset groups",
                self.c_in, self.groups
            )));
        }
        if self.c_u != self.c_v {
            return Err(Error::config(format!(
                "gate channels {} != value channels {}",
                self.c_u, self.c_v
            )));
        }
        if !(self.d > 0.0) {
            return Err(Error::config("attention scaling dimension must be positive"));
        }
        if self.grid_factor == 0 {
            return Err(Error::config("grid factor must be positive"));
        }
        if self.offset_kernel.is_multiple_of(2) {
            return Err(Error::config("offset kernel must be odd"));
        }
        Ok(())
    }

    pub fn validate_for(&self, h: usize, w: usize) -> Result<()> {
        self.validate()?;
        if !h.is_multiple_of(self.grid_factor) || !w.is_multiple_of(self.grid_factor) {
            return Err(Error::config(format!(
                "grid factor {} must divide {h}×{w}",
                self.grid_factor
            )));
        }
        Ok(())
    }
}

/// Projection matrices `W_q, W_k, W_v` (and optional gate `W_u`).
#[derive(Clone, Copy, Debug)]
pub struct Projections {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_u: Option<Var>,
}

/// Offset network parameters: grouped `k×k` conv (`c_q → c_q`, `S` groups),
/// GELU, grouped `1×1` conv (`c_q → 2S`, `S` groups).
#[derive(Clone, Copy, Debug)]
pub struct OffsetParams {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

/// Shapes of the offset network tensors for a config:
/// `(conv1_w, conv1_b, conv2_w, conv2_b)`.
pub fn offset_param_shapes(cfg: &AttentionConfig) -> [Vec<usize>; 4] {
    let per_group = cfg.c_q / cfg.groups;
    let k = cfg.offset_kernel;
    [
        vec![cfg.c_q, k, k, per_group],
        vec![cfg.c_q],
        vec![2 * cfg.groups, 1, 1, per_group],
        vec![2 * cfg.groups],
    ]
}

/// Everything one attention evaluation produces. Values live in the graph.
#[derive(Clone, Copy, Debug)]
pub struct AttentionArtifacts {
    /// `(H·W)×c_q`
    pub queries: Var,
    /// `tokens×c_q`
    pub keys: Var,
    /// `tokens×c_v`
    pub values: Var,
    /// Row-stochastic `(H·W)×tokens`.
    pub weights: Var,
    /// `H×W×c_v`
    pub output: Var,
}

pub(crate) fn map_dims(g: &Graph, x: Var) -> Result<(usize, usize, usize)> {
    match g.shape(x) {
        &[h, w, c] => Ok((h, w, c)),
        other => Err(Error::shape("feature map", other, &[0, 0, 0])),
    }
}

/// `(H·W)×C` token view of an `H×W×C` map.
pub fn tokens(g: &mut Graph, x: Var) -> Result<Var> {
    let (h, w, c) = map_dims(g, x)?;
    g.reshape(x, &[h * w, c])
}

fn check_proj(g: &Graph, w: Var, rows: usize, what: &'static str) -> Result<usize> {
    match g.shape(w) {
        &[r, c] if r == rows => Ok(c),
        other => Err(Error::shape(what, other, &[rows, 0])),
    }
}

/// `softmax(Q·Kᵀ / sqrt(d) + bias)`, with an optional additive constant
/// bias (used for windowed attention). Returns `(weights, weights·V)`.
pub fn attend(g: &mut Graph, q: Var, k: Var, v: Var, d: f64, bias: Option<Var>) -> Result<(Var, Var)> {
    let kt = g.transpose(k)?;
    let mut scores = g.matmul(q, kt)?;
    if let Some(b) = bias {
        scores = g.add(scores, b)?;
    }
    let weights = g.softmax_last(scores, d.sqrt())?;
    let out = g.matmul(weights, v)?;
    Ok((weights, out))
}

/// Self-attention over all `H·W` tokens of `x`.
pub fn vanilla_attention(g: &mut Graph, x: Var, proj: &Projections, d: f64) -> Result<AttentionArtifacts> {
    let (h, w, c_in) = map_dims(g, x)?;
    let c_q = check_proj(g, proj.w_q, c_in, "W_q")?;
    check_proj(g, proj.w_k, c_in, "W_k")?;
    let c_v = check_proj(g, proj.w_v, c_in, "W_v")?;
    if g.shape(proj.w_k)[1] != c_q {
        return Err(Error::shape("W_k", g.shape(proj.w_k), g.shape(proj.w_q)));
    }
    let xt = tokens(g, x)?;
    let q = g.matmul(xt, proj.w_q)?;
    let k = g.matmul(xt, proj.w_k)?;
    let v = g.matmul(xt, proj.w_v)?;
    let (weights, out) = attend(g, q, k, v, d, None)?;
    let output = g.reshape(out, &[h, w, c_v])?;
    Ok(AttentionArtifacts {
        queries: q,
        keys: k,
        values: v,
        weights,
        output,
    })
}

/// Runs the offset network on an `H×W×c_q` query map and returns the
/// `H_g×W_g×2S` offset map (channel `2i` = `dy`, `2i+1` = `dx` of group `i`).
/// The first convolution is strided by the grid factor.
pub fn offset_network(g: &mut Graph, q_map: Var, params: &OffsetParams, cfg: &AttentionConfig) -> Result<Var> {
    let (h, w, c) = map_dims(g, q_map)?;
    cfg.validate_for(h, w)?;
    if c != cfg.c_q {
        return Err(Error::shape("offset network input", &[h, w, c], &[h, w, cfg.c_q]));
    }
    let k = cfg.offset_kernel;
    let hidden = g.conv2d(
        q_map,
        params.conv1_w,
        Some(params.conv1_b),
        ConvSpec::new(k, cfg.grid_factor, k / 2, cfg.groups),
    )?;
    let hidden = g.activation(hidden, Activation::Gelu);
    g.conv2d(
        hidden,
        params.conv2_w,
        Some(params.conv2_b),
        ConvSpec::new(1, 1, 0, cfg.groups),
    )
}

/// Bilinearly gathers `x` at `grid + offsets`, group by group.
pub fn resample_features(g: &mut Graph, x: Var, grid: &ReferenceGrid, offsets: Var, groups: usize) -> Result<Var> {
    match g.shape(offsets) {
        &[hg, wg, c] if hg == grid.h_g && wg == grid.w_g && c == 2 * groups => {}
        other => {
            return Err(Error::shape(
                "resample offsets",
                other,
                &[grid.h_g, grid.w_g, 2 * groups],
            ))
        }
    }
    g.resample(x, offsets, groups)
}

/// Queries from `x`, keys and values from deformably resampled `x`.
pub fn deformable_attention(
    g: &mut Graph,
    x: Var,
    proj: &Projections,
    offsets: &OffsetParams,
    cfg: &AttentionConfig,
) -> Result<AttentionArtifacts> {
    let (h, w, c_in) = map_dims(g, x)?;
    cfg.validate_for(h, w)?;
    if c_in != cfg.c_in {
        return Err(Error::shape(
            "deformable attention input",
            &[h, w, c_in],
            &[h, w, cfg.c_in],
        ));
    }
    check_proj(g, proj.w_q, c_in, "W_q")?;
    check_proj(g, proj.w_k, c_in, "W_k")?;
    let c_v = check_proj(g, proj.w_v, c_in, "W_v")?;
    let grid = init_reference_grid(h, w, cfg.grid_factor)?;

    let xt = tokens(g, x)?;
    let q = g.matmul(xt, proj.w_q)?;
    let q_map = g.reshape(q, &[h, w, cfg.c_q])?;
    let delta = offset_network(g, q_map, offsets, cfg)?;
    let sampled = resample_features(g, x, &grid, delta, cfg.groups)?;
    let st = tokens(g, sampled)?;
    let k = g.matmul(st, proj.w_k)?;
    let v = g.matmul(st, proj.w_v)?;
    let (weights, out) = attend(g, q, k, v, cfg.d, None)?;
    let output = g.reshape(out, &[h, w, c_v])?;
    Ok(AttentionArtifacts {
        queries: q,
        keys: k,
        values: v,
        weights,
        output,
    })
}

/// `silu(x·W_u)` as an `H×W×c_u` map.
pub fn gate(g: &mut Graph, x: Var, w_u: Var) -> Result<Var> {
    let (h, w, c_in) = map_dims(g, x)?;
    let c_u = check_proj(g, w_u, c_in, "W_u")?;
    let xt = tokens(g, x)?;
    let u = g.matmul(xt, w_u)?;
    let s = g.activation(u, Activation::Silu);
    g.reshape(s, &[h, w, c_u])
}

/// Deformable attention whose aggregated output is multiplied elementwise
/// by `silu(x·W_u)`. The weights are those of the ungated attention.
pub fn gated_deformable_attention(
    g: &mut Graph,
    x: Var,
    proj: &Projections,
    offsets: &OffsetParams,
    cfg: &AttentionConfig,
) -> Result<AttentionArtifacts> {
    let w_u = proj
        .w_u
        .ok_or_else(|| Error::config("gated attention needs a gate projection W_u"))?;
    let c_v = g.shape(proj.w_v).get(1).copied().unwrap_or(0);
    if g.shape(w_u).get(1) != Some(&c_v) {
        return Err(Error::config(format!(
            "gate channels {:?} != value channels {c_v}",
            g.shape(w_u)
        )));
    }
    let art = deformable_attention(g, x, proj, offsets, cfg)?;
    let gate = gate(g, x, w_u)?;
    let output = g.mul(art.output, gate)?;
    Ok(AttentionArtifacts { output, ..art })
}
