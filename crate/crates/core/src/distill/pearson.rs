//! Pearson distance and the inter-/intra-object logit losses.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Added to the denominator when a vector is constant.
pub const PEARSON_EPS: f64 = 1e-8;
/// Centered squared norms below this count as constant.
const CONSTANT_SQ_NORM: f64 = 1e-20;

/// A Pearson distance and whether the eps guard was needed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PearsonDistance {
    pub value: f64,
    pub degenerate: bool,
}

/// `1 − corr(u, v)`, in `[0, 2]`.
pub fn pearson_distance(u: &[f64], v: &[f64]) -> Result<PearsonDistance> {
    if u.len() != v.len() {
        return Err(Error::shape("pearson_distance", &[u.len()], &[v.len()]));
    }
    if u.len() < 2 {
        return Err(Error::contract("pearson distance needs at least 2 entries"));
    }
    let n = u.len() as f64;
    let (mu, mv) = (u.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
    let (mut dot, mut su, mut sv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        let (a, b) = (a - mu, b - mv);
        dot += a * b;
        su += a * a;
        sv += b * b;
    }
    let degenerate = su < CONSTANT_SQ_NORM || sv < CONSTANT_SQ_NORM;
    let den = (su * sv).sqrt() + if degenerate { PEARSON_EPS } else { 0.0 };
    Ok(PearsonDistance {
        value: 1.0 - dot / den,
        degenerate,
    })
}

fn check_pair(ys: &Tensor, yt: &Tensor) -> Result<(usize, usize)> {
    match (ys.shape(), yt.shape()) {
        (&[b, n], &[b2, n2]) if b == b2 && n == n2 => Ok((b, n)),
        _ => Err(Error::shape("logit batch", ys.shape(), yt.shape())),
    }
}

/// Mean Pearson distance between corresponding rows.
pub fn inter_loss(ys: &Tensor, yt: &Tensor) -> Result<f64> {
    let (b, n) = check_pair(ys, yt)?;
    let mut acc = 0.0;
    for i in 0..b {
        acc += pearson_distance(&ys.data()[i * n..(i + 1) * n], &yt.data()[i * n..(i + 1) * n])?.value;
    }
    Ok(acc / b as f64)
}

/// Mean Pearson distance between corresponding columns.
pub fn intra_loss(ys: &Tensor, yt: &Tensor) -> Result<f64> {
    let (b, n) = check_pair(ys, yt)?;
    let mut acc = 0.0;
    for j in 0..n {
        let cs: Vec<f64> = (0..b).map(|i| ys.data()[i * n + j]).collect();
        let ct: Vec<f64> = (0..b).map(|i| yt.data()[i * n + j]).collect();
        acc += pearson_distance(&cs, &ct)?.value;
    }
    Ok(acc / n as f64)
}

/// Differentiable mean row-wise Pearson distance of two `B×N` matrices.
/// Returns the loss and the number of guarded (constant) rows.
pub fn rowwise_pearson_var(g: &mut Graph, ys: Var, yt: Var) -> Result<(Var, usize)> {
    if g.shape(ys) != g.shape(yt) || g.shape(ys).len() != 2 {
        return Err(Error::shape("pearson rows", g.shape(ys), g.shape(yt)));
    }
    let (b, n) = (g.shape(ys)[0], g.shape(ys)[1]);
    if n < 2 {
        return Err(Error::contract("pearson distance needs at least 2 entries per row"));
    }
    let cs = g.center_last(ys);
    let ct = g.center_last(yt);
    let prod = g.mul(cs, ct)?;
    let dot = g.sum_last(prod);
    let ss = g.mul(cs, cs)?;
    let ss = g.sum_last(ss);
    let tt = g.mul(ct, ct)?;
    let tt = g.sum_last(tt);
    let sq = g.mul(ss, tt)?;

    // constant rows: sqrt(x + eps²) keeps the gradient finite and the
    // denominator at eps
    let mut guarded = 0;
    let guard: Vec<f64> = g
        .value(ss)
        .data()
        .iter()
        .zip(g.value(tt).data())
        .map(|(&a, &b)| {
            if a < CONSTANT_SQ_NORM || b < CONSTANT_SQ_NORM {
                guarded += 1;
                PEARSON_EPS * PEARSON_EPS
            } else {
                0.0
            }
        })
        .collect();
    let sq = if guarded > 0 {
        let gv = g.constant(Tensor::new(vec![b], guard)?);
        g.add(sq, gv)?
    } else {
        sq
    };
    let den = g.sqrt(sq);
    let corr = g.div(dot, den)?;
    let mean_corr = g.mean(corr);
    let neg = g.scale(mean_corr, -1.0);
    Ok((g.add_scalar(neg, 1.0), guarded))
}

/// Differentiable inter-object loss (rows).
pub fn inter_loss_var(g: &mut Graph, ys: Var, yt: Var) -> Result<(Var, usize)> {
    rowwise_pearson_var(g, ys, yt)
}

/// Differentiable intra-object loss (columns).
pub fn intra_loss_var(g: &mut Graph, ys: Var, yt: Var) -> Result<(Var, usize)> {
    let a = g.transpose(ys)?;
    let b = g.transpose(yt)?;
    if g.shape(a)[1] < 2 {
        return Err(Error::contract("intra-object loss needs B ≥ 2"));
    }
    rowwise_pearson_var(g, a, b)
}
